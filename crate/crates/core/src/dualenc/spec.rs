use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
}

impl VisionSpec {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens plus the class token.
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPooling {
    /// Hidden state at the end-of-text token.
    Eot,
    /// Mean over the non-padding tokens.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSpec {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub causal: bool,
    pub pooling: TextPooling,
}

/// Architecture of both towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vision: VisionSpec,
    pub text: TextSpec,
    pub embed_dim: usize,
    /// Initial value of the log logit scale.
    pub init_log_logit_scale: f64,
}

/// Upper bound applied to the exponentiated logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

impl ModelSpec {
    /// Desk-scale surrogate: 4 blocks per tower, 32-wide embeddings.
    pub fn surrogate() -> Self {
        Self {
            vision: VisionSpec {
                image_size: 64,
                patch_size: 16,
                channels: 3,
                width: 32,
                layers: 4,
                heads: 4,
                mlp_width: 64,
            },
            text: TextSpec {
                vocab_size: 1024,
                context_length: 24,
                width: 32,
                layers: 4,
                heads: 4,
                mlp_width: 64,
                causal: false,
                pooling: TextPooling::Mean,
            },
            embed_dim: 32,
            init_log_logit_scale: (1.0f64 / 0.07).ln(),
        }
    }

    /// ViT-B/32 image tower with the matching 12-layer text transformer.
    pub fn clip_vit_b32() -> Self {
        Self {
            vision: VisionSpec {
                image_size: 224,
                patch_size: 32,
                channels: 3,
                width: 768,
                layers: 12,
                heads: 12,
                mlp_width: 3072,
            },
            text: TextSpec {
                vocab_size: 49408,
                context_length: 77,
                width: 512,
                layers: 12,
                heads: 8,
                mlp_width: 2048,
                causal: true,
                pooling: TextPooling::Eot,
            },
            embed_dim: 512,
            init_log_logit_scale: (1.0f64 / 0.07).ln(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vision;
        let t = &self.text;
        let bad = |m: String| Err(Error::InvalidInput(m));
        if v.patch_size == 0 || v.image_size % v.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                v.image_size, v.patch_size
            ));
        }
        if v.heads == 0 || v.width % v.heads != 0 {
            return bad(format!("vision width {} not divisible by {} heads", v.width, v.heads));
        }
        if t.heads == 0 || t.width % t.heads != 0 {
            return bad(format!("text width {} not divisible by {} heads", t.width, t.heads));
        }
        if t.context_length < 2 || t.vocab_size < 3 {
            return bad("text context must be >= 2 and vocabulary >= 3".into());
        }
        if self.embed_dim == 0 || v.layers == 0 || t.layers == 0 {
            return bad("embedding dim and layer counts must be positive".into());
        }
        Ok(())
    }

    /// Every parameter name with its 2-D shape, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let v = &self.vision;
        let t = &self.text;
        let mut out = Vec::new();
        let mut push = |name: String, shape: (usize, usize)| out.push((name, shape));

        push("vision_model.embeddings.class_embedding".into(), (1, v.width));
        push(
            "vision_model.embeddings.patch_embedding.weight".into(),
            (v.width, v.patch_dim()),
        );
        push(
            "vision_model.embeddings.position_embedding.weight".into(),
            (v.seq_len(), v.width),
        );
        push("vision_model.pre_layrnorm.weight".into(), (1, v.width));
        push("vision_model.pre_layrnorm.bias".into(), (1, v.width));
        for i in 0..v.layers {
            block_shapes(&format!("vision_model.encoder.layers.{i}"), v.width, v.mlp_width, &mut push);
        }
        push("vision_model.post_layernorm.weight".into(), (1, v.width));
        push("vision_model.post_layernorm.bias".into(), (1, v.width));
        push("visual_projection.weight".into(), (self.embed_dim, v.width));

        push(
            "text_model.embeddings.token_embedding.weight".into(),
            (t.vocab_size, t.width),
        );
        push(
            "text_model.embeddings.position_embedding.weight".into(),
            (t.context_length, t.width),
        );
        for i in 0..t.layers {
            block_shapes(&format!("text_model.encoder.layers.{i}"), t.width, t.mlp_width, &mut push);
        }
        push("text_model.final_layer_norm.weight".into(), (1, t.width));
        push("text_model.final_layer_norm.bias".into(), (1, t.width));
        push("text_projection.weight".into(), (self.embed_dim, t.width));
        push("logit_scale".into(), (1, 1));
        out
    }
}

fn block_shapes(prefix: &str, width: usize, mlp: usize, push: &mut impl FnMut(String, (usize, usize))) {
    for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
        push(format!("{prefix}.self_attn.{proj}.weight"), (width, width));
        push(format!("{prefix}.self_attn.{proj}.bias"), (1, width));
    }
    for ln in ["layer_norm1", "layer_norm2"] {
        push(format!("{prefix}.{ln}.weight"), (1, width));
        push(format!("{prefix}.{ln}.bias"), (1, width));
    }
    push(format!("{prefix}.mlp.fc1.weight"), (mlp, width));
    push(format!("{prefix}.mlp.fc1.bias"), (1, mlp));
    push(format!("{prefix}.mlp.fc2.weight"), (width, mlp));
    push(format!("{prefix}.mlp.fc2.bias"), (1, width));
}
