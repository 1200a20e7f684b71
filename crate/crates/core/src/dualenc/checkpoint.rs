//! Encoder checkpoints: safetensors parameter blobs plus a JSON header
//! carried in the file metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderHandle, EncoderKind, FreezePolicy, ModelSpec, Preprocess, TextTokenizer, TokenizerConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::util::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "surgline-checkpoint/1";

/// The single metadata key. safetensors keeps metadata in a hash map, so
/// one key keeps the serialized bytes stable.
const HEADER_KEY: &str = "surgline";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub id: String,
    pub kind: EncoderKind,
    pub spec: ModelSpec,
    pub tokenizer: TokenizerConfig,
    pub preprocess: Preprocess,
    pub policy: Option<FreezePolicy>,
    /// Stage-specific record (config, history).
    pub record: serde_json::Value,
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl EncoderHandle {
    /// SHA-256 over parameter names, shapes and little-endian values in
    /// registration order.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.params.iter() {
            h.update(name.as_bytes());
            h.update([0]);
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            h.update(tensor_bytes(t));
        }
        hex::encode(h.finalize())
    }

    /// Writes the encoder atomically. `id` becomes the loaded handle's
    /// origin.
    pub fn save_checkpoint(&self, path: &Path, id: &str, record: &serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            id: id.into(),
            kind: self.kind,
            spec: self.spec.clone(),
            tokenizer: self.tokenizer.config(),
            preprocess: self.preprocess.clone(),
            policy: self.policy,
            record: record.clone(),
        };
        let header_json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|(_, n, t)| (n.to_string(), vec![t.rows(), t.cols()], tensor_bytes(t)))
            .collect();
        let views = blobs
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(HEADER_KEY.to_string(), header_json)]);
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_atomic(path, &bytes)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(EncoderHandle, CheckpointHeader)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let header = parse_header(&bytes)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut store = ParamStore::new();
        for (name, (rows, cols)) in header.spec.param_shapes() {
            let view = st
                .tensor(&name)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if view.dtype() != Dtype::F32 || view.shape() != [rows, cols] {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected F32 {rows}x{cols}, found {:?} {:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(name, Tensor::from_vec(rows, cols, data));
        }
        let tokenizer = TextTokenizer::from_config(&header.tokenizer)?;
        let mut enc = EncoderHandle::from_parts(
            header.kind,
            header.spec.clone(),
            store,
            tokenizer,
            header.preprocess.clone(),
        )?;
        if let Some(p) = header.policy {
            enc.set_freeze_policy(p)?;
        }
        enc.origin = Some(header.id.clone());
        Ok((enc, header))
    }
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", header.format)));
    }
    Ok(header)
}

/// Header only, without materializing parameters.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let enc = EncoderHandle::surrogate(5)
            .apply_freeze_policy(FreezePolicy::last_three_blocks())
            .unwrap();
        let rec = serde_json::json!({"epochs": 2});
        let a = dir.path().join("a.safetensors");
        let b = dir.path().join("b.safetensors");
        enc.save_checkpoint(&a, "abc", &rec).unwrap();
        enc.save_checkpoint(&b, "abc", &rec).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let (back, header) = EncoderHandle::load_checkpoint(&a).unwrap();
        assert_eq!(header.record, rec);
        assert_eq!(back.origin(), Some("abc"));
        assert_eq!(back.param_digest(), enc.param_digest());
        assert_eq!(back.trainable_names(), enc.trainable_names());
        assert_eq!(read_checkpoint_header(&a).unwrap().id, "abc");
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(EncoderHandle::load_checkpoint(&p).is_err());
    }
}
