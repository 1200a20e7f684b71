use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CheckpointRecord, EpochStats, InitFrom, Selection, StageConfig};
use crate::contrastive::PositiveMask;
use crate::dualenc::{EncoderHandle, PreparedImages, Preprocess, VisionSpec};
use crate::error::{Error, Result};
use crate::image::FrameImage;
use crate::ingest::{balance, class_counts, FrameRecord, SplitRecords};
use crate::nn::Adam;
use crate::util::write_atomic;
use crate::vocab::{ClassVocabulary, PromptMode};
use crate::zeroshot::{build_prototypes, predict_from_embeddings, Aggregation, FrameRef};

/// Largest prepared-pixel cache kept in memory, in `f32` values.
const MAX_CACHED_VALUES: usize = 1 << 26;

/// Independent stream of a run's seed for one purpose.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Frame pixels, prepared once when small enough.
struct ImageSource {
    frames: Vec<FrameImage>,
    cached: Option<PreparedImages>,
    preprocess: Preprocess,
    vision: VisionSpec,
}

impl ImageSource {
    fn new(enc: &EncoderHandle, records: &[FrameRecord]) -> Result<Self> {
        let frames: Vec<FrameImage> = records.iter().map(|r| r.image.clone()).collect();
        let preprocess = enc.preprocess().clone();
        let vision = enc.spec().vision.clone();
        let per_frame = vision.grid().pow(2) * vision.patch_dim();
        let cached = if frames.len() * per_frame <= MAX_CACHED_VALUES {
            Some(preprocess.prepare(&frames, &vision)?)
        } else {
            None
        };
        Ok(Self {
            frames,
            cached,
            preprocess,
            vision,
        })
    }

    fn batch(&self, idx: &[usize]) -> Result<PreparedImages> {
        match &self.cached {
            Some(p) => Ok(p.select(idx)),
            None => {
                let frames: Vec<FrameImage> = idx.iter().map(|&i| self.frames[i].clone()).collect();
                self.preprocess.prepare(&frames, &self.vision)
            }
        }
    }
}

/// Text bank of every class, looked up by label.
fn text_bank(vocab: &ClassVocabulary) -> Result<BTreeMap<String, Vec<String>>> {
    vocab
        .class_ids()
        .into_iter()
        .map(|id| {
            let texts = vocab.prompts_for_class(&id, PromptMode::AllTexts)?;
            Ok((id, texts))
        })
        .collect()
}

fn check_labels(records: &[FrameRecord], vocab: &ClassVocabulary) -> Result<()> {
    match records.iter().find(|r| vocab.index_of(&r.label).is_none()) {
        Some(r) => Err(Error::UnknownClass {
            class_id: r.label.clone(),
            task: vocab.task.to_string(),
        }),
        None => Ok(()),
    }
}

/// Mean contrastive loss over `records` in fixed order, pairing each frame
/// with its class's canonical text.
fn eval_loss(
    enc: &mut EncoderHandle,
    images: &ImageSource,
    records: &[FrameRecord],
    bank: &BTreeMap<String, Vec<String>>,
    batch_size: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..records.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size) {
        let labels: Vec<&str> = chunk.iter().map(|&i| records[i].label.as_str()).collect();
        let texts: Vec<String> = labels.iter().map(|l| bank[*l][0].clone()).collect();
        let mask = PositiveMask::from_labels(&labels, &labels);
        let loss = enc.contrastive_step(None, &images.batch(chunk)?, &enc.tokenize(&texts), &mask)?;
        total += loss.value * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

fn val_top1(enc: &EncoderHandle, vocab: &ClassVocabulary, images: &ImageSource, records: &[FrameRecord]) -> Result<f64> {
    let protos = build_prototypes(enc, vocab, Aggregation::CanonicalOnly)?;
    let all: Vec<usize> = (0..records.len()).collect();
    let emb = enc.encode_prepared(&images.batch(&all)?)?;
    let refs: Vec<FrameRef> = records.iter().map(FrameRef::from).collect();
    let preds = predict_from_embeddings(&protos, &emb, &refs, enc.logit_scale(), 1)?;
    let hits = preds
        .iter()
        .filter(|p| Some(p.top1()) == p.frame.true_label.as_deref())
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Runs one fine-tuning stage on `enc` in place and returns its record.
///
/// The train split is balanced once per run; val and test keep their
/// natural distribution. Each frame in a batch is paired with one text
/// drawn uniformly from its class's five.
pub fn run_stage(
    enc: &mut EncoderHandle,
    data: &SplitRecords,
    vocab: &ClassVocabulary,
    cfg: &StageConfig,
) -> Result<CheckpointRecord> {
    cfg.validate()?;
    if vocab.task != cfg.stage.task() {
        return Err(Error::InvalidInput(format!(
            "{} trains on the {} vocabulary, got {}",
            cfg.stage,
            cfg.stage.task(),
            vocab.task
        )));
    }
    match &cfg.init_from {
        InitFrom::Checkpoint { id } if enc.origin() != Some(id.as_str()) => {
            return Err(Error::InvalidInput(format!(
                "{} expects weights from checkpoint {id}, encoder comes from {:?}",
                cfg.stage,
                enc.origin()
            )));
        }
        InitFrom::PretrainedBase if enc.origin().is_some() => {
            return Err(Error::InvalidInput(format!(
                "{} starts from the pretrained base, encoder comes from checkpoint {:?}",
                cfg.stage,
                enc.origin()
            )));
        }
        _ => {}
    }
    if data.train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    for split in [&data.train, &data.val] {
        check_labels(split, vocab)?;
    }
    enc.set_freeze_policy(cfg.freeze)?;

    let train = balance(&data.train, cfg.balancing, sub_seed(cfg.seed, 1))?;
    let train_class_counts = class_counts(&train);
    let bank = text_bank(vocab)?;
    let train_images = ImageSource::new(enc, &train)?;
    let val_images = ImageSource::new(enc, &data.val)?;

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2));
    let mut opt = Adam::new(cfg.learning_rate as f32);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, EncoderHandle)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<&str> = chunk.iter().map(|&i| train[i].label.as_str()).collect();
            let texts: Vec<String> = labels
                .iter()
                .map(|l| {
                    let options = &bank[*l];
                    options[rng.random_range(0..options.len())].clone()
                })
                .collect();
            let mask = PositiveMask::from_labels(&labels, &labels);
            mask.check_coverage()?;
            let tokens = enc.tokenize(&texts);
            let loss = enc
                .contrastive_step(Some(&mut opt), &train_images.batch(chunk)?, &tokens, &mask)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                    other => other,
                })?;
            total += loss.value * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: train loss {train_loss}")));
        }
        let (val_loss, top1) = if data.val.is_empty() {
            (None, None)
        } else {
            (
                Some(eval_loss(enc, &val_images, &data.val, &bank, cfg.batch_size)?),
                Some(val_top1(enc, vocab, &val_images, &data.val)?),
            )
        };
        log::info!(
            "{} epoch {epoch}/{}: train_loss {train_loss:.4} val_loss {val_loss:?} val_top1 {top1:?}",
            cfg.stage,
            cfg.epochs
        );
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_top1: top1,
        });
        if cfg.selection == Selection::BestValTop1 {
            let score = top1.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, enc.clone()));
            }
        }
    }

    let selected_epoch = match best {
        Some((_, epoch, snapshot)) => {
            *enc = snapshot;
            epoch
        }
        None => cfg.epochs,
    };
    let param_digest = enc.param_digest();
    let id = CheckpointRecord::compute_id(cfg, &history, selected_epoch, &param_digest);
    Ok(CheckpointRecord {
        id,
        config: cfg.clone(),
        history,
        selected_epoch,
        train_class_counts,
        param_digest,
    })
}

/// `epoch,train_loss,val_loss,val_top1`; missing values are empty.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::parse(path.display().to_string(), e);
    w.write_record(["epoch", "train_loss", "val_loss", "val_top1"]).map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train_loss.to_string(),
            opt(h.val_loss),
            opt(h.val_top1),
        ])
        .map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    write_atomic(path, &bytes)
}
