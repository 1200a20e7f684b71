//! Loader for pretrained CLIP weights in the Hugging Face safetensors
//! layout (`model.safetensors`, `config.json`, `vocab.json`, `merges.txt`).

use std::path::Path;

use safetensors::tensor::Dtype;
use safetensors::SafeTensors;
use serde::Deserialize;

use super::tokenizer::BpeTokenizer;
use super::{EncoderHandle, EncoderKind, ModelSpec, Preprocess, TextTokenizer};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Default, Deserialize)]
struct HfTowerConfig {
    hidden_size: Option<usize>,
    intermediate_size: Option<usize>,
    num_attention_heads: Option<usize>,
    num_hidden_layers: Option<usize>,
    hidden_act: Option<String>,
    // vision
    image_size: Option<usize>,
    patch_size: Option<usize>,
    num_channels: Option<usize>,
    // text
    max_position_embeddings: Option<usize>,
    vocab_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct HfConfig {
    projection_dim: Option<usize>,
    logit_scale_init_value: Option<f64>,
    #[serde(default)]
    text_config: HfTowerConfig,
    #[serde(default)]
    vision_config: HfTowerConfig,
}

/// Spec from a Hugging Face CLIP `config.json`; absent fields fall back to
/// the ViT-B/32 values.
pub fn spec_from_hf_config(json: &str) -> Result<ModelSpec> {
    let cfg: HfConfig = serde_json::from_str(json).map_err(|e| Error::parse("config.json", e))?;
    let mut spec = ModelSpec::clip_vit_b32();
    for act in [&cfg.text_config.hidden_act, &cfg.vision_config.hidden_act]
        .into_iter()
        .flatten()
    {
        if act != "quick_gelu" {
            return Err(Error::InvalidInput(format!("unsupported activation {act}")));
        }
    }
    let v = &cfg.vision_config;
    let s = &mut spec.vision;
    s.width = v.hidden_size.unwrap_or(s.width);
    s.mlp_width = v.intermediate_size.unwrap_or(s.mlp_width);
    s.heads = v.num_attention_heads.unwrap_or(s.heads);
    s.layers = v.num_hidden_layers.unwrap_or(s.layers);
    s.image_size = v.image_size.unwrap_or(s.image_size);
    s.patch_size = v.patch_size.unwrap_or(s.patch_size);
    s.channels = v.num_channels.unwrap_or(s.channels);
    let t = &cfg.text_config;
    let s = &mut spec.text;
    s.width = t.hidden_size.unwrap_or(s.width);
    s.mlp_width = t.intermediate_size.unwrap_or(s.mlp_width);
    s.heads = t.num_attention_heads.unwrap_or(s.heads);
    s.layers = t.num_hidden_layers.unwrap_or(s.layers);
    s.context_length = t.max_position_embeddings.unwrap_or(s.context_length);
    s.vocab_size = t.vocab_size.unwrap_or(s.vocab_size);
    spec.embed_dim = cfg.projection_dim.unwrap_or(spec.embed_dim);
    spec.init_log_logit_scale = cfg.logit_scale_init_value.unwrap_or(spec.init_log_logit_scale);
    spec.validate()?;
    Ok(spec)
}

fn to_f32(dtype: Dtype, bytes: &[u8]) -> Result<Vec<f32>> {
    Ok(match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

/// Parameters for `spec` read from Hugging Face CLIP safetensors bytes.
/// Tensors of any rank are flattened to the 2-D layout the towers use;
/// unrelated tensors are ignored.
pub fn params_from_hf_safetensors(spec: &ModelSpec, bytes: &[u8]) -> Result<ParamStore> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut store = ParamStore::new();
    for (name, (rows, cols)) in spec.param_shapes() {
        let view = st
            .tensor(&name)
            .map_err(|_| Error::Checkpoint(format!("pretrained weights lack {name}")))?;
        let numel: usize = view.shape().iter().product();
        if numel != rows * cols {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not fit {rows}x{cols}",
                view.shape()
            )));
        }
        let data = to_f32(view.dtype(), view.data())?;
        store.insert(name, Tensor::from_vec(rows, cols, data));
    }
    Ok(store)
}

impl EncoderHandle {
    /// Loads a pretrained backbone from a directory in the Hugging Face
    /// CLIP layout. Without `config.json` the ViT-B/32 shape is assumed.
    pub fn load_pretrained(dir: &Path) -> Result<Self> {
        let config_path = dir.join("config.json");
        let spec = if config_path.exists() {
            let json = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
            spec_from_hf_config(&json)?
        } else {
            ModelSpec::clip_vit_b32()
        };
        let weights = dir.join("model.safetensors");
        let bytes = std::fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
        let params = params_from_hf_safetensors(&spec, &bytes)?;
        let tokenizer = BpeTokenizer::from_files(
            &dir.join("vocab.json"),
            &dir.join("merges.txt"),
            spec.text.context_length,
        )?;
        let preprocess = Preprocess::clip(spec.vision.image_size);
        EncoderHandle::from_parts(
            EncoderKind::PretrainedBackbone,
            spec,
            params,
            TextTokenizer::Bpe {
                tokenizer,
                dir: dir.to_path_buf(),
            },
            preprocess,
        )
    }
}
