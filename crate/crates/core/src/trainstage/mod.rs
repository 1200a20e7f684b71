//! Staged contrastive fine-tuning, control runs and the linear probe.

mod probe;
mod stage;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dualenc::FreezePolicy;
use crate::error::{Error, Result};
use crate::ingest::Balancing;
use crate::vocab::Task;

pub use probe::{train_linear_probe, LinearProbe, ProbeConfig, ProbeResult, ProbeSplits};
pub use stage::{run_stage, write_history_csv};

/// Learning rate for the randomly initialized surrogate at desk scale;
/// the presets keep the rate used for the pretrained backbone.
pub const DESK_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GestureFt,
    PhaseFt,
    ControlPhaseOnly,
    ControlPhaseOnlyLong,
}

impl Stage {
    pub fn task(self) -> Task {
        match self {
            Stage::GestureFt => Task::Gesture,
            _ => Task::Phase,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::GestureFt => "gesture_ft",
            Stage::PhaseFt => "phase_ft",
            Stage::ControlPhaseOnly => "control_phase_only",
            Stage::ControlPhaseOnlyLong => "control_phase_only_long",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::parse("stage", format!("unknown stage {s:?}")))
    }
}

/// Starting weights of a stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFrom {
    PretrainedBase,
    /// A previous stage, by checkpoint id.
    Checkpoint { id: String },
}

/// Which epoch's weights a stage keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    LastEpoch,
    /// Highest zero-shot top-1 on the validation split (canonical prompts);
    /// earliest epoch wins ties.
    BestValTop1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub balancing: Balancing,
    pub freeze: FreezePolicy,
    pub seed: u64,
    pub init_from: InitFrom,
    #[serde(default)]
    pub selection: Selection,
}

impl StageConfig {
    /// Stage A: gestures, 50 epochs at 5e-5, batch 64, up-sampled.
    pub fn gesture_ft(seed: u64) -> Self {
        Self {
            stage: Stage::GestureFt,
            epochs: 50,
            learning_rate: 5e-5,
            batch_size: 64,
            balancing: Balancing::Upsample,
            freeze: FreezePolicy::last_three_blocks(),
            seed,
            init_from: InitFrom::PretrainedBase,
            selection: Selection::LastEpoch,
        }
    }

    /// Stage B: phases from a Stage A checkpoint, 15 epochs, batch 32,
    /// down-sampled.
    pub fn phase_ft(stage_a_id: impl Into<String>, seed: u64) -> Self {
        Self {
            stage: Stage::PhaseFt,
            epochs: 15,
            batch_size: 32,
            balancing: Balancing::Downsample,
            init_from: InitFrom::Checkpoint {
                id: stage_a_id.into(),
            },
            ..Self::gesture_ft(seed)
        }
    }

    /// Phase-only control from the base model, 15 epochs.
    pub fn control(seed: u64) -> Self {
        Self {
            stage: Stage::ControlPhaseOnly,
            init_from: InitFrom::PretrainedBase,
            ..Self::phase_ft("", seed)
        }
    }

    /// Phase-only control from the base model, 65 epochs.
    pub fn control_long(seed: u64) -> Self {
        Self {
            stage: Stage::ControlPhaseOnlyLong,
            epochs: 65,
            ..Self::control(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        match (&self.stage, &self.init_from) {
            (Stage::PhaseFt, InitFrom::PretrainedBase) => Err(Error::InvalidInput(
                "phase_ft must start from a gesture_ft checkpoint".into(),
            )),
            (Stage::PhaseFt, InitFrom::Checkpoint { .. }) => Ok(()),
            (_, InitFrom::Checkpoint { .. }) => Err(Error::InvalidInput(format!(
                "{} starts from the pretrained base",
                self.stage
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
}

/// Outcome of a stage, stored inside its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    /// Content hash of config, history and parameters.
    pub id: String,
    pub config: StageConfig,
    pub history: Vec<EpochStats>,
    pub selected_epoch: usize,
    /// Training frames per class after balancing.
    pub train_class_counts: std::collections::BTreeMap<String, usize>,
    pub param_digest: String,
}

impl CheckpointRecord {
    pub fn compute_id(
        config: &StageConfig,
        history: &[EpochStats],
        selected_epoch: usize,
        param_digest: &str,
    ) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config).expect("config serializes"));
        h.update(serde_json::to_vec(history).expect("history serializes"));
        h.update(selected_epoch.to_le_bytes());
        h.update(param_digest.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn verify_id(&self) -> bool {
        self.id == Self::compute_id(&self.config, &self.history, self.selected_epoch, &self.param_digest)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("record serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("bad record: {e}")))
    }

    pub fn save_history_csv(&self, path: &Path) -> Result<()> {
        write_history_csv(path, &self.history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_protocol() {
        let a = StageConfig::gesture_ft(1);
        assert_eq!((a.epochs, a.learning_rate, a.batch_size), (50, 5e-5, 64));
        assert_eq!(a.balancing, Balancing::Upsample);
        assert_eq!(a.freeze.unfreeze_last_k, 3);
        let b = StageConfig::phase_ft("abc", 1);
        assert_eq!((b.epochs, b.learning_rate, b.batch_size), (15, 5e-5, 32));
        assert_eq!(b.balancing, Balancing::Downsample);
        assert_eq!(b.init_from, InitFrom::Checkpoint { id: "abc".into() });
        let c = StageConfig::control_long(1);
        assert_eq!(c.epochs, 65);
        assert_eq!(c.init_from, InitFrom::PretrainedBase);
        assert_eq!(StageConfig::control(1).epochs, 15);
        for cfg in [a, b, c] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs() {
        let mut a = StageConfig::gesture_ft(1);
        a.epochs = 0;
        assert!(a.validate().is_err());
        let mut b = StageConfig::phase_ft("x", 1);
        b.init_from = InitFrom::PretrainedBase;
        assert!(b.validate().is_err());
        let mut c = StageConfig::control(1);
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        assert_eq!("phase_ft".parse::<Stage>().unwrap(), Stage::PhaseFt);
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn record_id_is_stable_under_reserialization() {
        let cfg = StageConfig::gesture_ft(3);
        let history = vec![EpochStats {
            epoch: 1,
            train_loss: 1.25,
            val_loss: Some(1.5),
            val_top1: None,
        }];
        let id = CheckpointRecord::compute_id(&cfg, &history, 1, "d");
        let rec = CheckpointRecord {
            id,
            config: cfg,
            history,
            selected_epoch: 1,
            train_class_counts: Default::default(),
            param_digest: "d".into(),
        };
        let json = serde_json::to_string(&rec.to_json()).unwrap();
        let back = CheckpointRecord::from_json(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, rec);
        assert!(back.verify_id());
    }
}
