//! Annotation parsing, frame sampling, video-level splits, class balancing
//! and synthetic datasets.

mod annotations;
mod balance;
mod split;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FrameDecoder, FrameImage};
use crate::util::{read_json, write_json};
use crate::vocab::Task;

pub use annotations::{
    labels_from_intervals, parse_gesture_transcript, parse_gesture_transcript_str, parse_phase_annotation,
    parse_phase_annotation_str, GestureInterval, PhaseNameMap, RowCountPolicy,
};
pub use balance::{balance, balance_downsample, balance_upsample, class_counts, Balancing, Labeled};
pub use split::{make_split, DatasetSplit, SplitName, SplitRecords, SplitSpec};
pub use synth::{class_pattern, synth_dataset, SynthConfig, SynthDataset, SYNTH_FPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub fps: f64,
    pub frame_count: usize,
    /// Frame directory, video file, or a synthetic tag.
    pub source: PathBuf,
}

impl VideoMeta {
    pub fn new(video_id: impl Into<String>, fps: f64, frame_count: usize, source: impl Into<PathBuf>) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidInput(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            video_id: video_id.into(),
            fps,
            frame_count,
            source: source.into(),
        })
    }
}

/// One sampled, labeled frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub timestamp_s: f64,
    pub label: String,
    pub image: FrameImage,
}

/// Output of [`sample_frames`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFrames {
    pub records: Vec<FrameRecord>,
    pub effective_fps: f64,
}

/// Keeps labeled frames whose index is a multiple of `stride`.
pub fn sample_frames(
    video: &VideoMeta,
    labels: &[Option<String>],
    stride: usize,
    decoder: &dyn FrameDecoder,
) -> Result<SampledFrames> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be at least 1".into()));
    }
    let records = labels
        .iter()
        .enumerate()
        .take(video.frame_count)
        .step_by(stride)
        .filter_map(|(i, l)| {
            l.as_ref().map(|label| FrameRecord {
                video_id: video.video_id.clone(),
                frame_index: i,
                timestamp_s: i as f64 / video.fps,
                label: label.clone(),
                image: decoder.frame(&video.video_id, &video.source, i),
            })
        })
        .collect();
    Ok(SampledFrames {
        records,
        effective_fps: video.fps / stride as f64,
    })
}

/// Orders records by (video, frame index), the canonical merge order.
pub fn sort_records(records: &mut [FrameRecord]) {
    records.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(a.frame_index.cmp(&b.frame_index))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub path: PathBuf,
    pub fps: f64,
    pub frame_count: usize,
    pub annotation: Option<PathBuf>,
    pub task: Task,
}

impl ManifestEntry {
    pub fn meta(&self) -> Result<VideoMeta> {
        VideoMeta::new(self.video_id.clone(), self.fps, self.frame_count, self.path.clone())
    }
}

/// Video list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<ManifestEntry>,
}

impl Manifest {
    /// Relative video and annotation paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Self = read_json(path)?;
        let base = base_dir(path)?;
        for v in &mut m.videos {
            if v.path.is_relative() {
                v.path = base.join(&v.path);
            }
            if let Some(a) = &mut v.annotation {
                if a.is_relative() {
                    *a = base.join(&*a);
                }
            }
        }
        Ok(m)
    }

    /// Paths are stored relative to the file's directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = base_dir(path)?;
        let mut out = self.clone();
        for v in &mut out.videos {
            v.path = relative_to(&v.path, &base)?;
            if let Some(a) = &mut v.annotation {
                *a = relative_to(a, &base)?;
            }
        }
        write_json(path, &out)
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.video_id.clone()).collect()
    }
}

/// Sampled frames of one task, as written by `prepare` and `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSet {
    pub task: Task,
    pub effective_fps: f64,
    pub records: Vec<FrameRecord>,
}

impl FrameSet {
    /// Relative frame paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut set: Self = read_json(path)?;
        let base = base_dir(path)?;
        for r in &mut set.records {
            if let FrameImage::File(p) = &mut r.image {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(set)
    }

    /// Frame paths are stored relative to the file's directory, so a set
    /// written next to its frames is relocatable. In-memory pixels are not
    /// serialized.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = base_dir(path)?;
        let mut out = self.clone();
        for r in &mut out.records {
            if let FrameImage::File(p) = &mut r.image {
                *p = relative_to(p, &base)?;
            }
        }
        write_json(path, &out)
    }
}

fn relative_to(p: &Path, base: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
    Ok(pathdiff::diff_paths(&abs, base).unwrap_or(abs))
}

fn base_dir(path: &Path) -> Result<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::path::absolute(parent).map_err(|e| Error::io(parent, e))
}
