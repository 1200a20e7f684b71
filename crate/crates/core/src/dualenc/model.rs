//! Forward passes of the two towers on a [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{ModelSpec, TextPooling};
use super::tokenizer::TokenBatch;
use crate::nn::{AttentionMask, Graph, ParamStore, Tensor, Var};

/// Randomly initialized parameters for `spec`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, (rows, cols)) in spec.param_shapes() {
        let is_norm = name.contains("norm") && name.ends_with(".weight");
        let value = if name == "logit_scale" {
            Tensor::filled(1, 1, spec.init_log_logit_scale as f32)
        } else if is_norm {
            Tensor::filled(rows, cols, 1.0)
        } else if name.ends_with(".bias") {
            Tensor::zeros(rows, cols)
        } else {
            let std = if name.ends_with("position_embedding.weight") {
                0.01
            } else if name.ends_with("token_embedding.weight") {
                0.02
            } else {
                // class token and (out, in) weight matrices
                (cols as f64).powf(-0.5)
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            let data = (0..rows * cols)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            Tensor::from_vec(rows, cols, data)
        };
        store.insert(name, value);
    }
    store
}

fn p(g: &mut Graph, name: &str) -> Var {
    g.param_by_name(name)
}

fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let w = p(g, &format!("{prefix}.weight"));
    let b = p(g, &format!("{prefix}.bias"));
    g.layer_norm(x, w, b)
}

fn dense(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let w = p(g, &format!("{prefix}.weight"));
    let b = p(g, &format!("{prefix}.bias"));
    g.linear(x, w, Some(b))
}

/// Pre-norm transformer block: attention then MLP, each residual.
fn block(g: &mut Graph, x: Var, prefix: &str, heads: usize, seq: usize, mask: &AttentionMask) -> Var {
    let h = layer_norm(g, x, &format!("{prefix}.layer_norm1"));
    let q = dense(g, h, &format!("{prefix}.self_attn.q_proj"));
    let k = dense(g, h, &format!("{prefix}.self_attn.k_proj"));
    let v = dense(g, h, &format!("{prefix}.self_attn.v_proj"));
    let a = g.attention(q, k, v, heads, seq, mask);
    let a = dense(g, a, &format!("{prefix}.self_attn.out_proj"));
    let x = g.add(x, a);
    let h = layer_norm(g, x, &format!("{prefix}.layer_norm2"));
    let h = dense(g, h, &format!("{prefix}.mlp.fc1"));
    let h = g.quick_gelu(h);
    let h = dense(g, h, &format!("{prefix}.mlp.fc2"));
    g.add(x, h)
}

/// Image tower on flattened patches `(batch · patches, patch_dim)`.
/// Returns unnormalized `(batch, embed_dim)` features.
pub fn image_tower(g: &mut Graph, spec: &ModelSpec, patches: Tensor, batch: usize) -> Var {
    let v = &spec.vision;
    let seq = v.seq_len();
    let x = g.input(patches);
    let w = p(g, "vision_model.embeddings.patch_embedding.weight");
    let x = g.linear(x, w, None);
    let cls = p(g, "vision_model.embeddings.class_embedding");
    let x = g.prepend_row(x, cls, batch);
    let pos = p(g, "vision_model.embeddings.position_embedding.weight");
    let mut x = g.add_tiled(x, pos, seq);
    x = layer_norm(g, x, "vision_model.pre_layrnorm");
    let mask = AttentionMask::default();
    for i in 0..v.layers {
        x = block(g, x, &format!("vision_model.encoder.layers.{i}"), v.heads, seq, &mask);
    }
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let pooled = g.select_rows(x, &cls_rows);
    let pooled = layer_norm(g, pooled, "vision_model.post_layernorm");
    let proj = p(g, "visual_projection.weight");
    g.linear(pooled, proj, None)
}

/// Text tower on a token batch. Returns unnormalized `(batch, embed_dim)`
/// features.
pub fn text_tower(g: &mut Graph, spec: &ModelSpec, tokens: &TokenBatch) -> Var {
    let t = &spec.text;
    let seq = tokens.context_length;
    let table = p(g, "text_model.embeddings.token_embedding.weight");
    let x = g.gather(table, &tokens.ids);
    let pos = p(g, "text_model.embeddings.position_embedding.weight");
    let mut x = g.add_tiled(x, pos, seq);
    let mask = AttentionMask {
        causal: t.causal,
        lengths: (!t.causal).then(|| tokens.lengths.clone()),
    };
    for i in 0..t.layers {
        x = block(g, x, &format!("text_model.encoder.layers.{i}"), t.heads, seq, &mask);
    }
    x = layer_norm(g, x, "text_model.final_layer_norm");
    let pooled = match t.pooling {
        TextPooling::Eot => {
            let rows: Vec<usize> = tokens
                .eot_positions
                .iter()
                .enumerate()
                .map(|(b, &e)| b * seq + e)
                .collect();
            g.select_rows(x, &rows)
        }
        TextPooling::Mean => {
            let segs: Vec<(usize, usize)> = tokens
                .lengths
                .iter()
                .enumerate()
                .map(|(b, &n)| (b * seq, n))
                .collect();
            g.segment_mean(x, &segs)
        }
    };
    let proj = p(g, "text_projection.weight");
    g.linear(pooled, proj, None)
}
