//! Decoded frame pixels and the frame-source abstraction.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar (channel-major) `f32` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Image(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Flattened non-overlapping `patch × patch` tiles in raster order, each
    /// laid out as (channel, row, col) to match convolution weights.
    pub fn patches(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Image(format!(
                "{}x{} image is not divisible into {patch}px patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..self.channels {
                    for dy in 0..patch {
                        let y = py * patch + dy;
                        let start = (c * self.height + y) * self.width + px * patch;
                        out.extend_from_slice(&self.data[start..start + patch]);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    /// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Image("only 3-channel images can be saved".into()));
        }
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let px = |c| (self.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([px(0), px(1), px(2)])
            });
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        buf.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Bilinear resize (half-pixel centers).
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let mut out = Image::zeros(self.channels, height, width);
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..self.channels {
                    let top = self.at(c, y0, x0) * (1.0 - wx) + self.at(c, y0, x1) * wx;
                    let bot = self.at(c, y1, x0) * (1.0 - wx) + self.at(c, y1, x1) * wx;
                    out.set(c, y, x, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<Image> {
        if height > self.height || width > self.width {
            return Err(Error::Image(format!(
                "cannot crop {height}x{width} from {}x{}",
                self.height, self.width
            )));
        }
        let top = (self.height - height) / 2;
        let left = (self.width - width) / 2;
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.at(c, top + y, left + x));
                }
            }
        }
        Ok(out)
    }
}

/// Pixels of a frame: already decoded, or a file to decode on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameImage {
    #[serde(skip)]
    Pixels(Arc<Image>),
    File(PathBuf),
}

impl FrameImage {
    pub fn load(&self) -> Result<Arc<Image>> {
        match self {
            FrameImage::Pixels(img) => Ok(Arc::clone(img)),
            FrameImage::File(path) => Ok(Arc::new(Image::load_png(path)?)),
        }
    }
}

/// Locates the image for a frame of a video.
pub trait FrameDecoder: Send + Sync {
    fn frame(&self, video_id: &str, video_source: &Path, frame_index: usize) -> FrameImage;
}

/// Frames pre-extracted as `<video dir>/<index, 6 digits>.png`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PngFrameDirectory;

impl PngFrameDirectory {
    pub fn frame_path(video_source: &Path, frame_index: usize) -> PathBuf {
        video_source.join(format!("{frame_index:06}.png"))
    }
}

impl FrameDecoder for PngFrameDirectory {
    fn frame(&self, _video_id: &str, video_source: &Path, frame_index: usize) -> FrameImage {
        FrameImage::File(Self::frame_path(video_source, frame_index))
    }
}
