//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as 8-bit grayscale buffers in raster order;
//! structured results are JSON strings.

use semdefect::augment::{copy_paste, CopyPasteSpec};
use semdefect::classic::{align, diff_detect};
use semdefect::detect::Detection;
use semdefect::image::quantize;
use semdefect::simgen::{gen_sample, DatasetConfig, Split};
use semdefect::{DefectMask, SemImage};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_gray(img: &SemImage) -> Vec<u8> {
    img.pixels.iter().map(|&v| quantize(v)).collect()
}

fn mask_gray(mask: &DefectMask) -> Vec<u8> {
    mask.labels.iter().map(|&l| if l > 0 { 255 } else { 0 }).collect()
}

fn js_err(e: semdefect::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A particle image, its shifted reference and the ground-truth mask.
#[wasm_bindgen]
pub struct Scene {
    image: SemImage,
    reference: SemImage,
    mask: DefectMask,
    applied_shift: Option<(i64, i64)>,
}

#[derive(Debug, Serialize)]
pub struct ClassicResult {
    /// Shift recovered by phase correlation.
    pub shift: (i64, i64),
    /// Shift the generator applied to the reference; `shift` undoes it.
    pub applied_shift: Option<(i64, i64)>,
    pub detections: Vec<Detection>,
    pub filtered: usize,
    /// `|image - registered reference|` scaled to 0..255.
    #[serde(skip)]
    pub diff: Vec<u8>,
}

impl Scene {
    pub fn generate(seed: u64, size: usize) -> semdefect::Result<Scene> {
        let cfg = DatasetConfig {
            height: size,
            width: size,
            seed,
            test_count: 1,
            ..DatasetConfig::default()
        };
        cfg.validate()?;
        let s = gen_sample(&cfg, Split::Test, 0)?;
        Ok(Scene {
            image: s.image,
            reference: s.reference.expect("test samples carry a reference"),
            mask: s.mask.expect("test samples carry a mask"),
            applied_shift: s.spec.reference_shift,
        })
    }

    pub fn classic(&self, k_sigma: f64, min_area: usize) -> semdefect::Result<ClassicResult> {
        let (aligned, shift) = align(&self.reference, &self.image)?;
        let out = diff_detect(&aligned, &self.image, k_sigma, min_area)?;
        let d: Vec<f64> = self.image.pixels.iter().zip(&aligned.pixels).map(|(a, b)| (a - b).abs()).collect();
        let peak = d.iter().cloned().fold(1e-9, f64::max);
        Ok(ClassicResult {
            shift,
            applied_shift: self.applied_shift,
            detections: out.detections,
            filtered: out.filtered.len(),
            diff: d.iter().map(|v| quantize(v / peak)).collect(),
        })
    }
}

#[wasm_bindgen]
impl Scene {
    /// `size` must be at least the largest line period (24).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> Result<Scene, JsError> {
        Scene::generate(seed as u64, size).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.image.width
    }

    pub fn image(&self) -> Vec<u8> {
        to_gray(&self.image)
    }

    pub fn reference(&self) -> Vec<u8> {
        to_gray(&self.reference)
    }

    pub fn mask(&self) -> Vec<u8> {
        mask_gray(&self.mask)
    }

    /// Copy-paste augmentation of the reference (a clean background).
    /// Returns the augmented image followed by its mask, each `size * size` bytes.
    pub fn copy_paste(&self, seed: u32, patch_min: usize, patch_max: usize, count: usize) -> Result<Vec<u8>, JsError> {
        let spec = CopyPasteSpec {
            patch_height: [patch_min, patch_max],
            patch_width: [patch_min, patch_max],
            count,
            ..CopyPasteSpec::default()
        };
        let out = copy_paste(&self.reference, &spec, seed as u64).map_err(js_err)?;
        let mut buf = to_gray(&out.image);
        buf.extend(mask_gray(&out.mask));
        Ok(buf)
    }

    /// Register the reference and run difference detection. Returns JSON
    /// with the recovered shift and the detections.
    pub fn detect(&self, k_sigma: f64, min_area: usize) -> Result<String, JsError> {
        let r = self.classic(k_sigma, min_area).map_err(js_err)?;
        serde_json::to_string(&r).map_err(|e| JsError::new(&e.to_string()))
    }

    /// Absolute difference after registration, scaled to its peak.
    pub fn difference(&self) -> Result<Vec<u8>, JsError> {
        Ok(self.classic(5.0, 1).map_err(js_err)?.diff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic() {
        let a = Scene::generate(3, 64).unwrap();
        let b = Scene::generate(3, 64).unwrap();
        assert_eq!(a.image.pixels, b.image.pixels);
        assert_eq!(a.mask.labels, b.mask.labels);
        assert!(a.mask.count() > 0);
    }

    #[test]
    fn classic_finds_the_particles() {
        let s = Scene::generate(5, 96).unwrap();
        let r = s.classic(5.0, 4).unwrap();
        assert!(!r.detections.is_empty());
        for d in &r.detections {
            let (row, col) = (d.center.0.round() as usize, d.center.1.round() as usize);
            assert_eq!(s.mask.get(row.min(95), col.min(95)), 1, "detection at {:?} off the mask", d.center);
        }
    }

    #[test]
    fn copy_paste_buffer_layout() {
        let s = Scene::generate(1, 64).unwrap();
        let spec = CopyPasteSpec::fixed(6, 6);
        let out = copy_paste(&s.reference, &spec, 9).unwrap();
        assert_eq!(out.mask.count(), 36);
        assert_eq!(to_gray(&out.image).len(), 64 * 64);
    }
}
