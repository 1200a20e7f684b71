use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FrameRecord, VideoMeta};
use crate::error::{Error, Result};
use crate::image::{FrameImage, Image};

/// Frame rate given to synthetic videos.
pub const SYNTH_FPS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
    pub seed: u64,
    /// Upper bound on the number of videos the frames are spread over.
    pub n_videos: usize,
    /// Letter of the class ids; ids run `{prefix}1..{prefix}{n_classes}`.
    pub label_prefix: char,
}

impl SynthConfig {
    /// Phase-style ids (`P`) up to seven classes, gesture-style (`G`) above.
    pub fn new(n_classes: usize, n_per_class: usize, image_size: usize, noise: f64, seed: u64) -> Self {
        Self {
            n_classes,
            n_per_class,
            image_size,
            noise,
            seed,
            n_videos: 10,
            label_prefix: if n_classes <= 7 { 'P' } else { 'G' },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub videos: Vec<VideoMeta>,
    pub records: Vec<FrameRecord>,
}

/// Noise-free pattern of class `k`: an oriented sinusoidal grating with a
/// class-specific frequency and colour.
pub fn class_pattern(k: usize, n_classes: usize, size: usize) -> Image {
    let theta = PI * k as f64 / n_classes as f64;
    let freq = 2.0 + (k % 3) as f64;
    let hue = 2.0 * PI * k as f64 / n_classes as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut img = Image::zeros(3, size, size);
    for c in 0..3 {
        let weight = 0.5 + 0.5 * (hue + 2.0 * PI * c as f64 / 3.0).cos();
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * ct + y as f64 * st) / size as f64;
                let wave = (2.0 * PI * freq * u).sin();
                img.set(c, y, x, (0.5 + 0.45 * weight * wave) as f32);
            }
        }
    }
    img
}

/// Frames of every class spread round-robin over the videos; each video
/// shows its classes in order as contiguous runs.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_classes < 2 {
        return Err(Error::InvalidInput("synthetic data needs at least 2 classes".into()));
    }
    if cfg.n_per_class == 0 || cfg.image_size == 0 || cfg.n_videos == 0 {
        return Err(Error::InvalidInput(
            "n_per_class, image_size and n_videos must be positive".into(),
        ));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return Err(Error::InvalidInput(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    let n_videos = cfg.n_videos.min(cfg.n_per_class);
    let patterns: Vec<Image> = (0..cfg.n_classes)
        .map(|k| class_pattern(k, cfg.n_classes, cfg.image_size))
        .collect();
    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut videos = Vec::with_capacity(n_videos);
    let mut records = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    for v in 0..n_videos {
        let video_id = format!("synth{v:02}");
        let mut frame_index = 0;
        for (k, pattern) in patterns.iter().enumerate() {
            let label = format!("{}{}", cfg.label_prefix, k + 1);
            for _ in (v..cfg.n_per_class).step_by(n_videos) {
                let mut img = pattern.clone();
                if cfg.noise > 0.0 {
                    for p in &mut img.data {
                        *p = (*p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                    }
                }
                records.push(FrameRecord {
                    video_id: video_id.clone(),
                    frame_index,
                    timestamp_s: frame_index as f64 / SYNTH_FPS,
                    label: label.clone(),
                    image: FrameImage::Pixels(Arc::new(img)),
                });
                frame_index += 1;
            }
        }
        videos.push(VideoMeta::new(
            video_id.clone(),
            SYNTH_FPS,
            frame_index,
            format!("synthetic:{video_id}"),
        )?);
    }
    Ok(SynthDataset { videos, records })
}
