//! Layered settings: config file < environment < flags. Clap resolves
//! flag-over-env; the file fills whatever both left unset.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

/// Keys accepted in a `--config` JSON file. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub balancing: Option<String>,
    pub unfreeze_last_k: Option<usize>,
    pub train_projections: Option<bool>,
    pub train_logit_scale: Option<bool>,
    pub selection: Option<String>,
    pub aggregation: Option<String>,
    pub window: Option<usize>,
    pub k: Option<Vec<usize>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with default settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic step; generated and recorded if omitted.
    #[arg(long, env = "SURGLINE_SEED")]
    pub seed: Option<u64>,
}

/// Seed from flag/env, then file, then a fresh random one.
pub struct ResolvedSeed {
    pub value: u64,
    pub generated: bool,
}

pub fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> ResolvedSeed {
    match flag.or(file.seed) {
        Some(value) => ResolvedSeed {
            value,
            generated: false,
        },
        None => ResolvedSeed {
            value: rand::random::<u32>() as u64,
            generated: true,
        },
    }
}

/// Parses a snake_case enum value through its serde representation.
pub fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .with_context(|| format!("invalid {what} {s:?}"))
}
