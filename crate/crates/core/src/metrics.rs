//! Top-k accuracy, support-weighted precision/recall/F1 and confusion
//! matrices over zero-shot predictions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{write_atomic, write_json};
use crate::zeroshot::Prediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: usize,
    /// Frames predicted (top-1) as this class.
    pub predicted: usize,
    pub true_positives: usize,
    /// Top-k accuracy restricted to this class's frames, keyed by k;
    /// `None` when the class has no frames.
    pub topk: BTreeMap<usize, Option<f64>>,
    /// 0 when nothing was predicted as this class.
    pub precision: f64,
    /// 0 when the class has no frames.
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_frames: usize,
    pub class_ids: Vec<String>,
    pub overall_topk: BTreeMap<usize, f64>,
    pub overall_top1: f64,
    pub overall_top5: Option<f64>,
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Support-weighted averages.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Unweighted means over classes that occur in truth or predictions.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub support: BTreeMap<String, usize>,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Index of each prediction's true and top-1 class within `class_ids`.
fn resolve(preds: &[Prediction], class_ids: &[String]) -> Result<Vec<(usize, usize)>> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("no predictions to evaluate".into()));
    }
    let index: BTreeMap<&str, usize> = class_ids.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let lookup = |id: &str| {
        index.get(id).copied().ok_or_else(|| Error::UnknownClass {
            class_id: id.to_string(),
            task: "evaluation".into(),
        })
    };
    preds
        .iter()
        .map(|p| {
            let truth = p.frame.true_label.as_deref().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "frame {}:{} has no true label",
                    p.frame.video_id, p.frame.frame_index
                ))
            })?;
            if p.ranking.is_empty() {
                return Err(Error::InvalidInput("prediction without ranking".into()));
            }
            for r in &p.ranking {
                lookup(r)?;
            }
            Ok((lookup(truth)?, lookup(p.top1())?))
        })
        .collect()
}

/// Evaluates `preds` against their true labels for every k in `k_set`.
/// k = 1 is always included.
pub fn evaluate(preds: &[Prediction], class_ids: &[String], k_set: &[usize]) -> Result<MetricsReport> {
    let pairs = resolve(preds, class_ids)?;
    let c = class_ids.len();
    let mut ks: Vec<usize> = k_set.to_vec();
    ks.push(1);
    ks.sort_unstable();
    ks.dedup();
    for &k in &ks {
        if k == 0 || k > c {
            return Err(Error::InvalidInput(format!("k = {k} outside 1..={c}")));
        }
        if let Some(p) = preds.iter().find(|p| p.ranking.len() < k) {
            return Err(Error::InvalidInput(format!(
                "top-{k} requested but frame {}:{} ranks only {} classes",
                p.frame.video_id,
                p.frame.frame_index,
                p.ranking.len()
            )));
        }
    }

    let n = preds.len();
    let mut support = vec![0usize; c];
    let mut predicted = vec![0usize; c];
    let mut tp = vec![0usize; c];
    let mut hits: BTreeMap<usize, Vec<usize>> = ks.iter().map(|&k| (k, vec![0; c])).collect();
    for (p, &(t, top)) in preds.iter().zip(&pairs) {
        support[t] += 1;
        predicted[top] += 1;
        if t == top {
            tp[t] += 1;
        }
        let truth = p.frame.true_label.as_deref().expect("resolved");
        for (&k, h) in hits.iter_mut() {
            if p.ranking[..k].iter().any(|r| r == truth) {
                h[t] += 1;
            }
        }
    }

    let overall_topk: BTreeMap<usize, f64> = hits
        .iter()
        .map(|(&k, h)| (k, h.iter().sum::<usize>() as f64 / n as f64))
        .collect();
    let mut per_class = BTreeMap::new();
    let (mut wp, mut wf) = (0.0, 0.0);
    let (mut mp, mut mr, mut mf, mut m_count) = (0.0, 0.0, 0.0, 0usize);
    for (i, id) in class_ids.iter().enumerate() {
        let precision = if predicted[i] > 0 { tp[i] as f64 / predicted[i] as f64 } else { 0.0 };
        let recall = if support[i] > 0 { tp[i] as f64 / support[i] as f64 } else { 0.0 };
        let f1 = f1_of(precision, recall);
        wp += support[i] as f64 * precision;
        wf += support[i] as f64 * f1;
        if support[i] > 0 || predicted[i] > 0 {
            mp += precision;
            mr += recall;
            mf += f1;
            m_count += 1;
        }
        let topk = hits
            .iter()
            .map(|(&k, h)| (k, (support[i] > 0).then(|| h[i] as f64 / support[i] as f64)))
            .collect();
        per_class.insert(
            id.clone(),
            ClassMetrics {
                support: support[i],
                predicted: predicted[i],
                true_positives: tp[i],
                topk,
                precision,
                recall,
                f1,
            },
        );
    }
    let m = m_count.max(1) as f64;
    Ok(MetricsReport {
        n_frames: n,
        class_ids: class_ids.to_vec(),
        overall_top1: overall_topk[&1],
        overall_top5: overall_topk.get(&5).copied(),
        overall_topk,
        per_class,
        precision: wp / n as f64,
        // Σ support·(tp/support) / n collapses to Σ tp / n; computed on the
        // integers so it equals top-1 bit for bit.
        recall: tp.iter().sum::<usize>() as f64 / n as f64,
        f1: wf / n as f64,
        macro_precision: mp / m,
        macro_recall: mr / m,
        macro_f1: mf / m,
        support: class_ids.iter().cloned().zip(support).collect(),
    })
}

impl MetricsReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// One row per class, then `weighted` and `macro` rows. Per-class
    /// accuracy columns are empty for classes without frames.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::parse(path.display().to_string(), e);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["class_id".to_string(), "support".into()];
        header.extend(self.overall_topk.keys().map(|k| format!("top{k}")));
        header.extend(["precision".into(), "recall".into(), "f1".into()]);
        w.write_record(&header).map_err(err)?;
        for id in &self.class_ids {
            let m = &self.per_class[id];
            let mut row = vec![id.clone(), m.support.to_string()];
            row.extend(m.topk.values().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            row.extend([m.precision.to_string(), m.recall.to_string(), m.f1.to_string()]);
            w.write_record(&row).map_err(err)?;
        }
        let mut weighted = vec!["weighted".to_string(), self.n_frames.to_string()];
        weighted.extend(self.overall_topk.values().map(|v| v.to_string()));
        weighted.extend([self.precision.to_string(), self.recall.to_string(), self.f1.to_string()]);
        w.write_record(&weighted).map_err(err)?;
        let mut macro_row = vec!["macro".to_string(), self.n_frames.to_string()];
        macro_row.extend(self.overall_topk.keys().map(|_| String::new()));
        macro_row.extend([
            self.macro_precision.to_string(),
            self.macro_recall.to_string(),
            self.macro_f1.to_string(),
        ]);
        w.write_record(&macro_row).map_err(err)?;
        let bytes = w.into_inner().map_err(|e| Error::parse(path.display().to_string(), e))?;
        write_atomic(path, &bytes)
    }
}

/// Counts indexed `[true][predicted]` in vocabulary order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_ids: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Each row divided by its support; rows without support stay zero.
    pub normalized: Option<Vec<Vec<f64>>>,
    /// Classes with no true frames.
    pub zero_support: Vec<String>,
}

pub fn confusion(preds: &[Prediction], class_ids: &[String], normalize: bool) -> Result<ConfusionMatrix> {
    let pairs = resolve(preds, class_ids)?;
    let c = class_ids.len();
    let mut counts = vec![vec![0usize; c]; c];
    for (t, p) in pairs {
        counts[t][p] += 1;
    }
    let supports: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let zero_support = class_ids
        .iter()
        .zip(&supports)
        .filter(|(_, &s)| s == 0)
        .map(|(id, _)| id.clone())
        .collect();
    let normalized = normalize.then(|| {
        counts
            .iter()
            .zip(&supports)
            .map(|(row, &s)| {
                row.iter()
                    .map(|&x| if s > 0 { x as f64 / s as f64 } else { 0.0 })
                    .collect()
            })
            .collect()
    });
    Ok(ConfusionMatrix {
        class_ids: class_ids.to_vec(),
        counts,
        normalized,
        zero_support,
    })
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class_id: &str) -> Option<usize> {
        let i = self.class_ids.iter().position(|c| c == class_id)?;
        Some(self.counts[i].iter().sum())
    }

    fn write_grid<T: ToString>(&self, path: &Path, rows: &[Vec<T>]) -> Result<()> {
        let err = |e: csv::Error| Error::parse(path.display().to_string(), e);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\pred".to_string()];
        header.extend(self.class_ids.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (id, row) in self.class_ids.iter().zip(rows) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(ToString::to_string));
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse(path.display().to_string(), e))?;
        write_atomic(path, &bytes)
    }

    pub fn save_counts_csv(&self, path: &Path) -> Result<()> {
        self.write_grid(path, &self.counts)
    }

    /// Errors when the matrix was built without normalization.
    pub fn save_normalized_csv(&self, path: &Path) -> Result<()> {
        match &self.normalized {
            Some(n) => self.write_grid(path, n),
            None => Err(Error::InvalidInput("confusion matrix was not normalized".into())),
        }
    }
}
