//! Defect-implant augmentation for clean backgrounds and the
//! segmentation-preserving photometric transform used for contrastive views.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DefectMask, SemImage};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopyPasteSpec {
    /// Inclusive range of patch heights.
    pub patch_height: [usize; 2],
    /// Inclusive range of patch widths.
    pub patch_width: [usize; 2],
    /// Minimum distance between source and destination rectangle centers.
    pub min_displacement: f64,
    /// Number of patches pasted into each image.
    pub count: usize,
}

impl Default for CopyPasteSpec {
    fn default() -> Self {
        Self {
            patch_height: [4, 12],
            patch_width: [4, 12],
            min_displacement: 3.0,
            count: 1,
        }
    }
}

impl CopyPasteSpec {
    /// Fixed-size patch.
    pub fn fixed(h: usize, w: usize) -> Self {
        Self {
            patch_height: [h, h],
            patch_width: [w, w],
            ..Self::default()
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let [h0, h1] = self.patch_height;
        let [w0, w1] = self.patch_width;
        if h0 < 1 || w0 < 1 || h0 > h1 || w0 > w1 {
            return Err(Error::param("patch size ranges must be [min, max] with min >= 1"));
        }
        if h1 > height || w1 > width {
            return Err(Error::param(format!(
                "patch up to {h1}x{w1} does not fit a {height}x{width} image"
            )));
        }
        if !(self.min_displacement >= 1.0) {
            return Err(Error::param("min_displacement must be >= 1"));
        }
        Ok(())
    }
}

/// Where one patch was copied from and pasted to (top-left corners).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct CopyPasteOutput {
    pub image: SemImage,
    pub mask: DefectMask,
    pub placements: Vec<Placement>,
}

fn disjoint(a: (usize, usize), b: (usize, usize), h: usize, w: usize) -> bool {
    a.0 + h <= b.0 || b.0 + h <= a.0 || a.1 + w <= b.1 || b.1 + w <= a.1
}

/// Copy random rectangles of `img` to other, disjoint locations of the same
/// image and mark every destination rectangle as defect.
pub fn copy_paste(img: &SemImage, spec: &CopyPasteSpec, seed: u64) -> Result<CopyPasteOutput> {
    spec.validate(img.height, img.width)?;
    let mut rng = rng::seeded(seed);
    let mut out = img.clone();
    let mut mask = DefectMask::zeros(img.height, img.width);
    let mut placements = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let h = rng.random_range(spec.patch_height[0]..=spec.patch_height[1]);
        let w = rng.random_range(spec.patch_width[0]..=spec.patch_width[1]);
        let max_r = img.height - h;
        let max_c = img.width - w;
        let mut found = None;
        for _ in 0..1000 {
            let src = (rng.random_range(0..=max_r), rng.random_range(0..=max_c));
            let dst = (rng.random_range(0..=max_r), rng.random_range(0..=max_c));
            let dr = src.0 as f64 - dst.0 as f64;
            let dc = src.1 as f64 - dst.1 as f64;
            if disjoint(src, dst, h, w) && (dr * dr + dc * dc).sqrt() >= spec.min_displacement {
                found = Some((src, dst));
                break;
            }
        }
        let (src, dst) = found.ok_or_else(|| {
            Error::param(format!(
                "no disjoint placement for a {h}x{w} patch in a {}x{} image",
                img.height, img.width
            ))
        })?;
        for i in 0..h {
            for j in 0..w {
                out.set(dst.0 + i, dst.1 + j, img.get(src.0 + i, src.1 + j));
                mask.set(dst.0 + i, dst.1 + j, true);
            }
        }
        placements.push(Placement {
            src,
            dst,
            height: h,
            width: w,
        });
    }
    Ok(CopyPasteOutput {
        image: out,
        mask,
        placements,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotometricSpec {
    pub noise_sigma: f64,
    /// Multiplicative contrast factor interval.
    pub contrast_range: [f64; 2],
    /// Additive brightness offset interval.
    pub brightness_range: [f64; 2],
}

impl Default for PhotometricSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.03,
            contrast_range: [0.8, 1.2],
            brightness_range: [-0.1, 0.1],
        }
    }
}

impl PhotometricSpec {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            contrast_range: [1.0, 1.0],
            brightness_range: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_interval = |iv: [f64; 2]| iv[0].is_finite() && iv[1].is_finite() && iv[0] <= iv[1];
        if !finite_interval(self.contrast_range) || !finite_interval(self.brightness_range) {
            return Err(Error::param("photometric ranges must be finite [min, max] intervals"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param("photometric noise_sigma must be >= 0"));
        }
        Ok(())
    }
}

/// `clip(a * img + b + n, 0, 1)` with `a`, `b` drawn from the spec ranges.
pub fn photometric(img: &SemImage, spec: &PhotometricSpec, seed: u64) -> Result<SemImage> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let mut draw = |iv: [f64; 2]| if iv[1] > iv[0] { rng.random_range(iv[0]..=iv[1]) } else { iv[0] };
    let a = draw(spec.contrast_range);
    let b = draw(spec.brightness_range);
    Ok(photometric_with(img, a, b, spec.noise_sigma, rng::derive(seed, 1)))
}

/// Photometric transform with explicit contrast `a` and brightness `b`.
pub fn photometric_with(img: &SemImage, a: f64, b: f64, noise_sigma: f64, seed: u64) -> SemImage {
    let pixels: Vec<f64> = if noise_sigma > 0.0 {
        let mut rng = rng::seeded(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        img.pixels
            .iter()
            .map(|v| a * v + b + normal.sample(&mut rng))
            .collect()
    } else {
        img.pixels.iter().map(|v| a * v + b).collect()
    };
    SemImage::from_clipped(img.height, img.width, pixels, img.seed)
}

/// Per-pixel class-balancing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

/// `N / (2 N_fg)` on foreground and `N / (2 N_bg)` on background, or all
/// ones when either class is empty.
pub fn weight_map(mask: &DefectMask) -> WeightMap {
    let n = mask.labels.len();
    let n_fg = mask.count();
    let n_bg = n - n_fg;
    let weights = if n_fg == 0 || n_bg == 0 {
        vec![1.0; n]
    } else {
        let w_fg = n as f64 / (2.0 * n_fg as f64);
        let w_bg = n as f64 / (2.0 * n_bg as f64);
        mask.labels
            .iter()
            .map(|y| if *y == 1 { w_fg } else { w_bg })
            .collect()
    };
    WeightMap {
        height: mask.height,
        width: mask.width,
        weights,
    }
}
