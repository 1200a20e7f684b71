//! Zero-shot classification of frames against text-bank prototypes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dualenc::EncoderHandle;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::ingest::FrameRecord;
use crate::matrix::{dot, softmax, Matrix};
use crate::util::write_atomic;
use crate::vocab::{ClassVocabulary, PromptMode, TEXTS_PER_CLASS};

/// Number of ranked classes written to prediction dumps.
pub const DUMP_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Renormalized mean of the canonical text and its paraphrases.
    #[default]
    MeanOfTexts,
    CanonicalOnly,
    /// Keep every text; a class scores its best-matching text.
    MaxSim,
}

/// Text-side class representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypeSet {
    pub class_ids: Vec<String>,
    pub aggregation: Aggregation,
    /// One row per class, or every text for [`Aggregation::MaxSim`].
    pub embeddings: EmbeddingMatrix,
    /// Class index of each row of `embeddings`.
    pub owners: Vec<usize>,
}

impl ClassPrototypeSet {
    /// From the embeddings of all texts, `TEXTS_PER_CLASS` consecutive rows
    /// per class with the canonical text first.
    pub fn from_text_embeddings(
        class_ids: Vec<String>,
        texts: &EmbeddingMatrix,
        aggregation: Aggregation,
    ) -> Result<Self> {
        let c = class_ids.len();
        if texts.rows() != c * TEXTS_PER_CLASS {
            return Err(Error::Shape(format!(
                "{} text rows for {c} classes, expected {}",
                texts.rows(),
                c * TEXTS_PER_CLASS
            )));
        }
        let d = texts.dim();
        let (embeddings, owners) = match aggregation {
            Aggregation::MaxSim => (
                texts.clone(),
                (0..c).flat_map(|k| std::iter::repeat_n(k, TEXTS_PER_CLASS)).collect(),
            ),
            Aggregation::CanonicalOnly => {
                let rows: Vec<usize> = (0..c).map(|k| k * TEXTS_PER_CLASS).collect();
                (texts.select(&rows), (0..c).collect())
            }
            Aggregation::MeanOfTexts => {
                let mut m = Matrix::zeros(c, d);
                for k in 0..c {
                    let out = m.row_mut(k);
                    for t in 0..TEXTS_PER_CLASS {
                        for (o, v) in out.iter_mut().zip(texts.row(k * TEXTS_PER_CLASS + t)) {
                            *o += v / TEXTS_PER_CLASS as f64;
                        }
                    }
                }
                (EmbeddingMatrix::normalize(m)?, (0..c).collect())
            }
        };
        Ok(Self {
            class_ids,
            aggregation,
            embeddings,
            owners,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Per-class cosine of one image embedding.
    pub fn class_cosines(&self, image: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.num_classes()];
        for (r, &k) in self.owners.iter().enumerate() {
            let c = dot(self.embeddings.row(r), image);
            if c > out[k] {
                out[k] = c;
            }
        }
        out
    }
}

pub fn build_prototypes(
    enc: &EncoderHandle,
    vocab: &ClassVocabulary,
    aggregation: Aggregation,
) -> Result<ClassPrototypeSet> {
    let mut texts = Vec::with_capacity(vocab.len() * TEXTS_PER_CLASS);
    for id in vocab.class_ids() {
        texts.extend(vocab.prompts_for_class(&id, PromptMode::AllTexts)?);
    }
    let emb = enc.encode_texts(&texts)?;
    ClassPrototypeSet::from_text_embeddings(vocab.class_ids(), &emb, aggregation)
}

/// Provenance of a predicted frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: usize,
    pub timestamp_s: f64,
    pub true_label: Option<String>,
}

impl From<&FrameRecord> for FrameRef {
    fn from(r: &FrameRecord) -> Self {
        Self {
            video_id: r.video_id.clone(),
            frame_index: r.frame_index,
            timestamp_s: r.timestamp_s,
            true_label: Some(r.label.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub frame: FrameRef,
    /// Top-k class ids, best first.
    pub ranking: Vec<String>,
    /// Softmax confidences aligned with `ranking`.
    pub scores: Vec<f64>,
    /// Cosine per class in vocabulary order; empty when read back from a
    /// dump.
    pub cosines: Vec<f64>,
}

impl Prediction {
    pub fn top1(&self) -> &str {
        &self.ranking[0]
    }
}

/// Ranks classes for pre-computed image embeddings.
pub fn predict_from_embeddings(
    protos: &ClassPrototypeSet,
    images: &EmbeddingMatrix,
    frames: &[FrameRef],
    logit_scale: f64,
    k: usize,
) -> Result<Vec<Prediction>> {
    let c = protos.num_classes();
    if k == 0 || k > c {
        return Err(Error::InvalidInput(format!("k = {k} outside 1..={c}")));
    }
    if images.rows() != frames.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} frames",
            images.rows(),
            frames.len()
        )));
    }
    if images.dim() != protos.embeddings.dim() {
        return Err(Error::Shape(format!(
            "image dim {} != prototype dim {}",
            images.dim(),
            protos.embeddings.dim()
        )));
    }
    let mut out = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let cosines = protos.class_cosines(images.row(i));
        let logits: Vec<f64> = cosines.iter().map(|c| c * logit_scale).collect();
        let probs = softmax(&logits);
        let mut order: Vec<usize> = (0..c).collect();
        // Stable: equal cosines keep vocabulary order.
        order.sort_by(|&a, &b| cosines[b].total_cmp(&cosines[a]));
        order.truncate(k);
        out.push(Prediction {
            frame: frame.clone(),
            ranking: order.iter().map(|&j| protos.class_ids[j].clone()).collect(),
            scores: order.iter().map(|&j| probs[j]).collect(),
            cosines,
        });
    }
    Ok(out)
}

pub fn predict_topk(
    enc: &EncoderHandle,
    protos: &ClassPrototypeSet,
    frames: &[FrameRecord],
    k: usize,
) -> Result<Vec<Prediction>> {
    let images: Vec<_> = frames.iter().map(|f| f.image.clone()).collect();
    let emb = enc.encode_images(&images)?;
    let refs: Vec<FrameRef> = frames.iter().map(FrameRef::from).collect();
    predict_from_embeddings(protos, &emb, &refs, enc.logit_scale(), k)
}

fn csv_err(path: &Path, e: impl ToString) -> Error {
    Error::parse(path.display().to_string(), e)
}

/// `video_id, frame_index, timestamp_s, true_label, top1..top5,
/// score_top1..score_top5`; missing ranks are left empty.
pub fn write_predictions_csv(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["video_id".to_string(), "frame_index".into(), "timestamp_s".into(), "true_label".into()];
    header.extend((1..=DUMP_TOP_K).map(|i| format!("top{i}")));
    header.extend((1..=DUMP_TOP_K).map(|i| format!("score_top{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for p in preds {
        let mut row = vec![
            p.frame.video_id.clone(),
            p.frame.frame_index.to_string(),
            p.frame.timestamp_s.to_string(),
            p.frame.true_label.clone().unwrap_or_default(),
        ];
        row.extend((0..DUMP_TOP_K).map(|i| p.ranking.get(i).cloned().unwrap_or_default()));
        row.extend((0..DUMP_TOP_K).map(|i| p.scores.get(i).map(|s| s.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(path, e))?;
    write_atomic(path, &bytes)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_err(path, format!("missing column {name}")))
    };
    let (vid, fi, ts, tl) = (col("video_id")?, col("frame_index")?, col("timestamp_s")?, col("true_label")?);
    let mut top_cols = Vec::new();
    let mut score_cols = Vec::new();
    for i in 1.. {
        match (col(&format!("top{i}")), col(&format!("score_top{i}"))) {
            (Ok(t), Ok(s)) => {
                top_cols.push(t);
                score_cols.push(s);
            }
            _ => break,
        }
    }
    if top_cols.is_empty() {
        return Err(csv_err(path, "no top1 column"));
    }
    let mut preds = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| csv_err(path, format!("row {}: bad {what}", line + 2));
        let mut ranking = Vec::new();
        let mut scores = Vec::new();
        for (&t, &s) in top_cols.iter().zip(&score_cols) {
            if rec[t].is_empty() {
                break;
            }
            ranking.push(rec[t].to_string());
            scores.push(rec[s].parse::<f64>().map_err(|_| bad("score"))?);
        }
        if ranking.is_empty() {
            return Err(bad("top1"));
        }
        preds.push(Prediction {
            frame: FrameRef {
                video_id: rec[vid].to_string(),
                frame_index: rec[fi].parse().map_err(|_| bad("frame_index"))?,
                timestamp_s: rec[ts].parse().map_err(|_| bad("timestamp_s"))?,
                true_label: (!rec[tl].is_empty()).then(|| rec[tl].to_string()),
            },
            ranking,
            scores,
            cosines: Vec::new(),
        });
    }
    Ok(preds)
}

/// Raw cosines: `video_id, frame_index, <class ids…>`.
pub fn write_cosines_csv(path: &Path, class_ids: &[String], preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["video_id".to_string(), "frame_index".into()];
    header.extend(class_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for p in preds {
        let mut row = vec![p.frame.video_id.clone(), p.frame.frame_index.to_string()];
        row.extend(p.cosines.iter().map(|c| c.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(path, e))?;
    write_atomic(path, &bytes)
}
