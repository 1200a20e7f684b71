//! Dual image/text encoder: a pretrained CLIP-layout backbone adapter and a
//! small deterministic surrogate sharing one implementation.

mod backbone;
mod checkpoint;
mod model;
mod spec;
pub mod tokenizer;

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::contrastive::{backprop_similarity, multi_positive_infonce_with_grad, similarity_logits, LossOutput, PositiveMask};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::image::{FrameImage, Image};
use crate::matrix::Matrix;
use crate::nn::{Adam, Graph, ParamId, ParamStore, Tensor, Var};

pub use backbone::{params_from_hf_safetensors, spec_from_hf_config};
pub use checkpoint::{read_checkpoint_header, CheckpointHeader, CHECKPOINT_FORMAT};
pub use model::init_params;
pub use spec::{ModelSpec, TextPooling, TextSpec, VisionSpec, MAX_LOGIT_SCALE};
use tokenizer::{BpeTokenizer, HashTokenizer, TokenBatch};

/// Rows encoded per forward pass in evaluation mode.
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    PretrainedBackbone,
    Surrogate,
}

/// Which parameters a fine-tuning stage may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    /// Transformer blocks left trainable at the top of each tower.
    pub unfreeze_last_k: usize,
    pub train_projections: bool,
    pub train_logit_scale: bool,
}

impl FreezePolicy {
    /// Last three blocks per tower; projections and logit scale frozen.
    pub fn last_three_blocks() -> Self {
        Self {
            unfreeze_last_k: 3,
            train_projections: false,
            train_logit_scale: false,
        }
    }

    pub fn frozen() -> Self {
        Self {
            unfreeze_last_k: 0,
            train_projections: false,
            train_logit_scale: false,
        }
    }
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self::last_three_blocks()
    }
}

/// Parameter names a policy leaves trainable on a model of the given spec.
pub fn trainable_names(spec: &ModelSpec, policy: &FreezePolicy) -> Result<BTreeSet<String>> {
    let depth = spec.vision.layers.min(spec.text.layers);
    if policy.unfreeze_last_k > depth {
        return Err(Error::Freeze(format!(
            "unfreeze_last_k {} exceeds encoder depth {depth}",
            policy.unfreeze_last_k
        )));
    }
    let mut prefixes = Vec::new();
    for (tower, layers) in [("vision_model", spec.vision.layers), ("text_model", spec.text.layers)] {
        for i in layers - policy.unfreeze_last_k..layers {
            prefixes.push(format!("{tower}.encoder.layers.{i}."));
        }
    }
    let names = spec
        .param_shapes()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| {
            prefixes.iter().any(|p| n.starts_with(p))
                || (policy.train_projections
                    && (n == "visual_projection.weight" || n == "text_projection.weight"))
                || (policy.train_logit_scale && n == "logit_scale")
        })
        .collect();
    Ok(names)
}

/// Pixel pipeline owned by the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    /// Resize the short side to this and center-crop to the input size.
    /// `None` requires inputs already at the input size.
    pub resize_short_side: Option<usize>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Preprocess {
    pub fn surrogate() -> Self {
        Self {
            resize_short_side: None,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }

    pub fn clip(image_size: usize) -> Self {
        Self {
            resize_short_side: Some(image_size),
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_6, 0.275_777_1],
        }
    }

    /// Model-ready patch rows for one image.
    pub fn apply(&self, img: &Image, vision: &VisionSpec) -> Result<Vec<f32>> {
        if img.channels != vision.channels {
            return Err(Error::Image(format!(
                "expected {} channels, got {}",
                vision.channels, img.channels
            )));
        }
        let size = vision.image_size;
        let mut img = match self.resize_short_side {
            Some(short) => {
                let (h, w) = (img.height, img.width);
                if h == 0 || w == 0 {
                    return Err(Error::Image("empty image".into()));
                }
                let (nh, nw) = if h <= w {
                    (short, ((w * short) as f64 / h as f64).round().max(1.0) as usize)
                } else {
                    (((h * short) as f64 / w as f64).round().max(1.0) as usize, short)
                };
                img.resize(nh, nw).center_crop(size, size)?
            }
            None => {
                if img.height != size || img.width != size {
                    return Err(Error::Image(format!(
                        "expected {size}x{size} input, got {}x{}",
                        img.height, img.width
                    )));
                }
                img.clone()
            }
        };
        let plane = size * size;
        for c in 0..img.channels {
            let (m, s) = (self.mean[c.min(2)], self.std[c.min(2)]);
            for v in &mut img.data[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
        img.patches(vision.patch_size)
    }

    /// Loads and prepares a batch of frames.
    pub fn prepare(&self, frames: &[FrameImage], vision: &VisionSpec) -> Result<PreparedImages> {
        let per = vision.grid() * vision.grid();
        let mut data = Vec::with_capacity(frames.len() * per * vision.patch_dim());
        for f in frames {
            let img = f.load()?;
            data.extend(self.apply(&img, vision)?);
        }
        Ok(PreparedImages {
            patches_per_image: per,
            patches: Tensor::from_vec(frames.len() * per, vision.patch_dim(), data),
        })
    }
}

/// Serializable description of the text tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TokenizerConfig {
    Hash(HashTokenizer),
    Bpe { dir: PathBuf, context_length: usize },
}

#[derive(Debug, Clone)]
pub enum TextTokenizer {
    Hash(HashTokenizer),
    Bpe { tokenizer: BpeTokenizer, dir: PathBuf },
}

impl TextTokenizer {
    pub fn from_config(cfg: &TokenizerConfig) -> Result<Self> {
        Ok(match cfg {
            TokenizerConfig::Hash(h) => TextTokenizer::Hash(h.clone()),
            TokenizerConfig::Bpe {
                dir,
                context_length,
            } => TextTokenizer::Bpe {
                tokenizer: BpeTokenizer::from_files(
                    &dir.join("vocab.json"),
                    &dir.join("merges.txt"),
                    *context_length,
                )?,
                dir: dir.clone(),
            },
        })
    }

    pub fn config(&self) -> TokenizerConfig {
        match self {
            TextTokenizer::Hash(h) => TokenizerConfig::Hash(h.clone()),
            TextTokenizer::Bpe { tokenizer, dir } => TokenizerConfig::Bpe {
                dir: dir.clone(),
                context_length: tokenizer.context_length,
            },
        }
    }

    pub fn encode(&self, texts: &[String]) -> TokenBatch {
        match self {
            TextTokenizer::Hash(h) => h.encode(texts),
            TextTokenizer::Bpe { tokenizer, .. } => tokenizer.encode(texts),
        }
    }
}

/// Images turned into patch rows, ready for the image tower.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImages {
    patches_per_image: usize,
    patches: Tensor,
}

impl PreparedImages {
    pub fn len(&self) -> usize {
        if self.patches_per_image == 0 {
            0
        } else {
            self.patches.rows() / self.patches_per_image
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch of the given images, in order.
    pub fn select(&self, indices: &[usize]) -> PreparedImages {
        let per = self.patches_per_image;
        let cols = self.patches.cols();
        let mut data = Vec::with_capacity(indices.len() * per * cols);
        for &i in indices {
            data.extend_from_slice(&self.patches.data()[i * per * cols..(i + 1) * per * cols]);
        }
        PreparedImages {
            patches_per_image: per,
            patches: Tensor::from_vec(indices.len() * per, cols, data),
        }
    }

    fn range(&self, start: usize, end: usize) -> Tensor {
        let per = self.patches_per_image;
        let cols = self.patches.cols();
        Tensor::from_vec(
            (end - start) * per,
            cols,
            self.patches.data()[start * per * cols..end * per * cols].to_vec(),
        )
    }
}

/// Both towers, their parameters, and the active freeze policy.
#[derive(Debug, Clone)]
pub struct EncoderHandle {
    kind: EncoderKind,
    spec: ModelSpec,
    params: ParamStore,
    tokenizer: TextTokenizer,
    preprocess: Preprocess,
    policy: Option<FreezePolicy>,
    trainable: BTreeSet<ParamId>,
    origin: Option<String>,
}

impl EncoderHandle {
    /// Surrogate with the default desk-scale spec.
    pub fn surrogate(seed: u64) -> Self {
        Self::surrogate_with(ModelSpec::surrogate(), seed).expect("default surrogate spec is valid")
    }

    pub fn surrogate_with(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let tokenizer = TextTokenizer::Hash(HashTokenizer {
            vocab_size: spec.text.vocab_size,
            context_length: spec.text.context_length,
        });
        let params = init_params(&spec, seed);
        Self::from_parts(EncoderKind::Surrogate, spec, params, tokenizer, Preprocess::surrogate())
    }

    /// Assembles a handle, checking every parameter against the spec. No
    /// freeze policy is active, so all parameters are trainable.
    pub fn from_parts(
        kind: EncoderKind,
        spec: ModelSpec,
        params: ParamStore,
        tokenizer: TextTokenizer,
        preprocess: Preprocess,
    ) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!(
                "spec declares {} parameters, store has {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = params
                .by_name(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if t.shape() != *shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let trainable = params.iter().map(|(id, _, _)| id).collect();
        Ok(Self {
            kind,
            spec,
            params,
            tokenizer,
            preprocess,
            policy: None,
            trainable,
            origin: None,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    pub fn tokenizer(&self) -> &TextTokenizer {
        &self.tokenizer
    }

    pub fn policy(&self) -> Option<FreezePolicy> {
        self.policy
    }

    /// Id of the checkpoint this handle was loaded from, if any.
    pub fn origin(&self) -> Option<&str> {
        self.origin.as_deref()
    }

    pub fn set_origin(&mut self, origin: Option<String>) {
        self.origin = origin;
    }

    pub fn trainable_ids(&self) -> &BTreeSet<ParamId> {
        &self.trainable
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.trainable
            .iter()
            .map(|&id| self.params.name(id).to_string())
            .collect()
    }

    /// Shallower of the two towers.
    pub fn depth(&self) -> usize {
        self.spec.vision.layers.min(self.spec.text.layers)
    }

    /// `exp` of the stored log scale, capped at [`MAX_LOGIT_SCALE`].
    pub fn logit_scale(&self) -> f64 {
        let log = self.params.by_name("logit_scale").expect("logit_scale").data()[0] as f64;
        log.exp().min(MAX_LOGIT_SCALE)
    }

    pub fn apply_freeze_policy(mut self, policy: FreezePolicy) -> Result<Self> {
        self.set_freeze_policy(policy)?;
        Ok(self)
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) -> Result<()> {
        let names = trainable_names(&self.spec, &policy)?;
        self.trainable = names.iter().map(|n| self.params.expect_id(n)).collect();
        self.policy = Some(policy);
        Ok(())
    }

    pub fn tokenize(&self, texts: &[String]) -> TokenBatch {
        self.tokenizer.encode(texts)
    }

    pub fn prepare_images(&self, frames: &[FrameImage]) -> Result<PreparedImages> {
        self.preprocess.prepare(frames, &self.spec.vision)
    }

    pub fn encode_images(&self, frames: &[FrameImage]) -> Result<EmbeddingMatrix> {
        self.encode_prepared(&self.prepare_images(frames)?)
    }

    pub fn encode_prepared(&self, images: &PreparedImages) -> Result<EmbeddingMatrix> {
        let n = images.len();
        let mut rows = Vec::with_capacity(n * self.spec.embed_dim);
        for start in (0..n).step_by(ENCODE_CHUNK) {
            let end = (start + ENCODE_CHUNK).min(n);
            let mut g = Graph::inference(&self.params);
            let out = model::image_tower(&mut g, &self.spec, images.range(start, end), end - start);
            rows.extend(g.value(out).data().iter().map(|&v| v as f64));
        }
        EmbeddingMatrix::normalize(Matrix::from_vec(n, self.spec.embed_dim, rows)?)
    }

    pub fn encode_texts(&self, prompts: &[String]) -> Result<EmbeddingMatrix> {
        if prompts.is_empty() {
            return Err(Error::InvalidInput("no prompts to encode".into()));
        }
        let mut rows = Vec::with_capacity(prompts.len() * self.spec.embed_dim);
        for chunk in prompts.chunks(ENCODE_CHUNK) {
            let tokens = self.tokenize(chunk);
            let mut g = Graph::inference(&self.params);
            let out = model::text_tower(&mut g, &self.spec, &tokens);
            rows.extend(g.value(out).data().iter().map(|&v| v as f64));
        }
        EmbeddingMatrix::normalize(Matrix::from_vec(prompts.len(), self.spec.embed_dim, rows)?)
    }

    /// Contrastive loss of a batch; with an optimizer, also one update of the
    /// trainable parameters.
    pub fn contrastive_step(
        &mut self,
        optimizer: Option<&mut Adam>,
        images: &PreparedImages,
        texts: &TokenBatch,
        mask: &PositiveMask,
    ) -> Result<LossOutput> {
        let scale = self.logit_scale();
        let train = optimizer.is_some() && !self.trainable.is_empty();
        let (loss, grads) = {
            let mut g = if train {
                Graph::training(&self.params, &self.trainable)
            } else {
                Graph::inference(&self.params)
            };
            let img_raw = model::image_tower(&mut g, &self.spec, images.range(0, images.len()), images.len());
            let img = g.l2_normalize(img_raw);
            let txt_raw = model::text_tower(&mut g, &self.spec, texts);
            let txt = g.l2_normalize(txt_raw);
            let img_m = to_matrix(&g, img)?;
            let txt_m = to_matrix(&g, txt)?;
            let img_e = EmbeddingMatrix::normalize(img_m)?;
            let txt_e = EmbeddingMatrix::normalize(txt_m)?;
            let logits = similarity_logits(&img_e, &txt_e, scale)?;
            let (loss, g_logits) = multi_positive_infonce_with_grad(&logits, mask)?;
            let grads = if train {
                let (d_img, d_txt) =
                    backprop_similarity(&g_logits, img_e.as_matrix(), txt_e.as_matrix(), scale)?;
                let mut grads = g.backward(&[(img, to_tensor(&d_img)), (txt, to_tensor(&d_txt))]);
                let ls = self.params.expect_id("logit_scale");
                if self.trainable.contains(&ls) && scale < MAX_LOGIT_SCALE {
                    // d loss / d log(scale) = Σ G ∘ logits
                    let d: f64 = g_logits
                        .as_slice()
                        .iter()
                        .zip(logits.as_slice())
                        .map(|(a, b)| a * b)
                        .sum();
                    grads.insert(ls, Tensor::filled(1, 1, d as f32));
                }
                Some(grads)
            } else {
                None
            };
            (loss, grads)
        };
        if let (Some(opt), Some(grads)) = (optimizer, grads) {
            if let Some((id, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} is not finite",
                    self.params.name(*id)
                )));
            }
            opt.step(&mut self.params, &grads);
        }
        Ok(loss)
    }

    /// Parameter values, for snapshot comparisons.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect()
    }
}

fn to_matrix(g: &Graph, v: Var) -> Result<Matrix> {
    let t = g.value(v);
    Matrix::from_vec(t.rows(), t.cols(), t.data().iter().map(|&x| x as f64).collect())
}

fn to_tensor(m: &Matrix) -> Tensor {
    Tensor::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|&x| x as f32).collect())
}
