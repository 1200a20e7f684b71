use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use surgline_core::util::{sha256_hex, write_json};

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Written next to a command's outputs as `<command>.manifest.json`.
/// Holds no timestamps so reruns are byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub seed_generated: bool,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Digest of a directory tree: sorted relative paths with their hashes.
fn hash_dir(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
        for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).unwrap_or(&path);
                out.push((rel.to_string_lossy().replace('\\', "/"), hash_file(&path)?));
            }
        }
        Ok(())
    }
    let mut entries = Vec::new();
    walk(dir, dir, &mut entries)?;
    entries.sort();
    let listing: String = entries.iter().map(|(p, h)| format!("{p} {h}\n")).collect();
    Ok(sha256_hex(listing.as_bytes()))
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            seed: None,
            seed_generated: false,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(mut self, seed: u64, generated: bool) -> Self {
        self.seed = Some(seed);
        self.seed_generated = generated;
        self
    }

    /// Records an input file (or directory) under the path it was given as.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.input_as(name, path, path)
    }

    /// Hashes `actual` but records it as `shown`.
    pub fn input_as(&mut self, name: &str, shown: &Path, actual: &Path) -> Result<()> {
        let sha256 = if actual.is_dir() { hash_dir(actual)? } else { hash_file(actual)? };
        self.inputs.push(FileHash {
            name: name.into(),
            path: shown.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Records an output file or directory relative to `out`.
    pub fn output(&mut self, out: &Path, name: &str, rel: &str) -> Result<()> {
        let full = out.join(rel);
        let sha256 = if full.is_dir() { hash_dir(&full)? } else { hash_file(&full)? };
        self.outputs.push(FileHash {
            name: name.into(),
            path: PathBuf::from(rel),
            sha256,
        });
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(format!("{}.manifest.json", self.command));
        write_json(&path, self)?;
        Ok(path)
    }
}
