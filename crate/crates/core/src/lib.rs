//! Staged contrastive grounding of surgical video frames in language, with
//! zero-shot prediction, evaluation and timeline construction.

pub mod contrastive;
pub mod dualenc;
pub mod embedding;
pub mod error;
pub mod image;
pub mod ingest;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod timeline;
pub mod trainstage;
pub mod util;
pub mod vocab;
pub mod zeroshot;

pub use error::{Error, Result};
pub use contrastive::{multi_positive_infonce, LossOutput, MultiPositiveInfoNce, PositiveMask};
pub use dualenc::{EncoderHandle, EncoderKind, FreezePolicy};
pub use embedding::EmbeddingMatrix;
pub use ingest::{DatasetSplit, FrameRecord, FrameSet, Manifest, SplitRecords};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use timeline::{Timeline, TimelineSegment};
pub use trainstage::{CheckpointRecord, Stage, StageConfig};
pub use vocab::{ClassVocabulary, Task};
pub use zeroshot::{Aggregation, Prediction};
