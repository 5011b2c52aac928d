//! Gray-level images, binary masks and the small amount of filtering shared by
//! the generator, the augmentations and the classic baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image with gray values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    /// Provenance tag: the seed the image was generated from (0 when loaded).
    pub seed: u64,
}

impl SemImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, seed: u64) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::param(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            seed,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width],
            seed: 0,
        }
    }

    /// Build from arbitrary values, clipping into `[0, 1]`.
    pub fn from_clipped(height: usize, width: usize, mut pixels: Vec<f64>, seed: u64) -> Self {
        assert_eq!(pixels.len(), height * width);
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            height,
            width,
            pixels,
            seed,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Copy of the `h x w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<SemImage> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(h * w);
        for r in row..row + h {
            pixels.extend_from_slice(&self.pixels[r * self.width + col..r * self.width + col + w]);
        }
        Ok(SemImage {
            height: h,
            width: w,
            pixels,
            seed: self.seed,
        })
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len().max(1) as f64
    }

    /// Write as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|v| quantize(*v)).collect();
        save_gray(path, self.width, self.height, bytes)
    }

    pub fn load_png(path: &Path) -> Result<SemImage> {
        let (h, w, bytes) = load_gray(path)?;
        let pixels = bytes.into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(SemImage {
            height: h,
            width: w,
            pixels,
            seed: 0,
        })
    }
}

/// Per-pixel binary label map aligned with a [`SemImage`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectMask {
    pub height: usize,
    pub width: usize,
    /// 0 or 1 per pixel, row-major.
    pub labels: Vec<u8>,
}

impl DefectMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        if labels.iter().any(|v| *v > 1) {
            return Err(Error::param("mask labels must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.labels[row * self.width + col] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.labels.iter().map(|v| *v as usize).sum()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<DefectMask> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut labels = Vec::with_capacity(h * w);
        for r in row..row + h {
            labels.extend_from_slice(&self.labels[r * self.width + col..r * self.width + col + w]);
        }
        Ok(DefectMask {
            height: h,
            width: w,
            labels,
        })
    }

    pub fn union_with(&mut self, other: &DefectMask) {
        for (a, b) in self.labels.iter_mut().zip(&other.labels) {
            *a |= *b;
        }
    }

    /// Write as an 8-bit PNG with values {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.labels.iter().map(|v| v * 255).collect();
        save_gray(path, self.width, self.height, bytes)
    }

    pub fn load_png(path: &Path) -> Result<DefectMask> {
        let (h, w, bytes) = load_gray(path)?;
        Ok(DefectMask {
            height: h,
            width: w,
            labels: bytes.into_iter().map(|b| (b >= 128) as u8).collect(),
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_gray(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::shape("pixel buffer does not match image size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Codec {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Ok((h as usize, w as usize, gray.into_raw()))
}

/// Normalized 1-D Gaussian kernel truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Replicate the nearest edge sample.
    Clamp,
    /// Treat samples outside the buffer as zero.
    Zero,
}

/// Separable Gaussian blur of a row-major `height x width` buffer.
pub fn gaussian_blur(data: &[f64], height: usize, width: usize, sigma: f64, border: Border) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let sample = |buf: &[f64], idx: i64, len: usize, stride: usize, base: usize| -> f64 {
        if idx >= 0 && (idx as usize) < len {
            buf[base + idx as usize * stride]
        } else {
            match border {
                Border::Zero => 0.0,
                Border::Clamp => buf[base + idx.clamp(0, len as i64 - 1) as usize * stride],
            }
        }
    };
    let mut tmp = vec![0.0; data.len()];
    for row in 0..height {
        let base = row * width;
        for col in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * sample(data, col as i64 + t as i64 - r, width, 1, base);
            }
            tmp[base + col] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for col in 0..width {
        for row in 0..height {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * sample(&tmp, row as i64 + t as i64 - r, height, width, col);
            }
            out[row * width + col] = acc;
        }
    }
    out
}

/// Circular shift: `out[r][c] = data[(r - dy) mod h][(c - dx) mod w]`.
pub fn circular_shift(data: &[f64], height: usize, width: usize, dy: i64, dx: i64) -> Vec<f64> {
    let h = height as i64;
    let w = width as i64;
    let mut out = vec![0.0; data.len()];
    for r in 0..h {
        let sr = (r - dy).rem_euclid(h);
        for c in 0..w {
            let sc = (c - dx).rem_euclid(w);
            out[(r * w + c) as usize] = data[(sr * w + sc) as usize];
        }
    }
    out
}
