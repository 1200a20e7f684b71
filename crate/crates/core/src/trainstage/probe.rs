use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::matrix::{log_sum_exp, softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 5e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Row indices of the embedding matrix per split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Single linear layer: `weight` is (classes × D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub class_ids: Vec<String>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weight.rows())
            .map(|c| crate::matrix::dot(self.weight.row(c), x) + self.bias[c])
            .collect()
    }

    /// Index of the highest logit; ties go to the earlier class.
    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        let mut best = 0;
        for c in 1..l.len() {
            if l[c] > l[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, emb: &EmbeddingMatrix, targets: &[usize], rows: &[usize]) -> f64 {
        let hits = rows
            .iter()
            .filter(|&&r| self.predict(emb.row(r)) == targets[r])
            .count();
        hits as f64 / rows.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: LinearProbe,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub final_train_loss: f64,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
        }
    }
}

/// Softmax cross-entropy probe trained with Adam on frozen embeddings.
/// `class_ids` fixes the output order; every label must be one of them.
pub fn train_linear_probe(
    emb: &EmbeddingMatrix,
    labels: &[String],
    class_ids: &[String],
    cfg: &ProbeConfig,
    splits: &ProbeSplits,
) -> Result<ProbeResult> {
    if labels.len() != emb.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            emb.rows()
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidInput("probe epochs, batch size and learning rate must be positive".into()));
    }
    if splits.train.is_empty() {
        return Err(Error::InvalidInput("probe needs training rows".into()));
    }
    let mut seen = BTreeSet::new();
    for &r in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if r >= emb.rows() {
            return Err(Error::InvalidInput(format!("split row {r} out of range")));
        }
        if !seen.insert(r) {
            return Err(Error::InvalidInput(format!("row {r} appears in more than one split")));
        }
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| {
            class_ids.iter().position(|c| c == l).ok_or_else(|| Error::UnknownClass {
                class_id: l.clone(),
                task: "probe".into(),
            })
        })
        .collect::<Result<_>>()?;
    let present: BTreeSet<usize> = splits.train.iter().map(|&r| targets[r]).collect();
    if present.len() < class_ids.len() {
        log::warn!(
            "probe train split covers {} of {} classes",
            present.len(),
            class_ids.len()
        );
    }

    let (c, d) = (class_ids.len(), emb.dim());
    // Weights then biases, flattened.
    let mut params = vec![0.0; c * d + c];
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = splits.train.clone();
    let mut last_loss = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = vec![0.0; params.len()];
            let inv = 1.0 / batch.len() as f64;
            for &r in batch {
                let x = emb.row(r);
                let logits: Vec<f64> = (0..c)
                    .map(|k| crate::matrix::dot(&params[k * d..(k + 1) * d], x) + params[c * d + k])
                    .collect();
                epoch_loss += log_sum_exp(logits.iter().copied()) - logits[targets[r]];
                let mut p = softmax(&logits);
                p[targets[r]] -= 1.0;
                for k in 0..c {
                    let g = p[k] * inv;
                    for (gw, xi) in grads[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gw += g * xi;
                    }
                    grads[c * d + k] += g;
                }
            }
            adam.step(&mut params, &grads, cfg.learning_rate);
        }
        last_loss = epoch_loss / order.len() as f64;
        if !last_loss.is_finite() {
            return Err(Error::NonFinite(format!("probe loss {last_loss}")));
        }
    }
    let probe = LinearProbe {
        class_ids: class_ids.to_vec(),
        weight: Matrix::from_vec(c, d, params[..c * d].to_vec())?,
        bias: params[c * d..].to_vec(),
    };
    let acc = |rows: &[usize]| (!rows.is_empty()).then(|| probe.accuracy(emb, &targets, rows));
    Ok(ProbeResult {
        train_accuracy: probe.accuracy(emb, &targets, &splits.train),
        val_accuracy: acc(&splits.val),
        test_accuracy: acc(&splits.test),
        final_train_loss: last_loss,
        probe,
    })
}
