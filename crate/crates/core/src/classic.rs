//! Reference-vs-defect baseline: phase-correlation registration, robust
//! thresholding of the difference image, blob detection.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::detect::{connected_components, fit_ellipse, DetectOutcome, ScoreMap};
use crate::error::{Error, Result};
use crate::image::{circular_shift, DefectMask, SemImage};

pub const DEFAULT_K_SIGMA: f64 = 5.0;
/// Scale from median absolute deviation to the standard deviation of a normal.
const MAD_TO_SIGMA: f64 = 1.4826;

fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Integer circular shift `(dy, dx)` with `def ~= shift(ref, (dy, dx))`,
/// reported in `[-H/2, H/2) x [-W/2, W/2)`.
pub fn phase_correlate(reference: &SemImage, defect: &SemImage) -> Result<(i64, i64)> {
    if reference.shape() != defect.shape() {
        return Err(Error::shape(format!(
            "reference {:?} vs defect {:?}",
            reference.shape(),
            defect.shape()
        )));
    }
    for (name, img) in [("reference", reference), ("defect", defect)] {
        if variance(&img.pixels) < 1e-18 {
            return Err(Error::Degenerate(format!(
                "{name} image is constant; the cross-power spectrum cannot be normalized"
            )));
        }
    }
    let (h, w) = reference.shape();
    let to_complex = |img: &SemImage| -> Vec<Complex64> {
        img.pixels.iter().map(|v| Complex64::new(*v, 0.0)).collect()
    };
    let mut fr = to_complex(reference);
    let mut fd = to_complex(defect);
    fft2(&mut fr, h, w, false);
    fft2(&mut fd, h, w, false);
    let mut cross: Vec<Complex64> = fd
        .iter()
        .zip(&fr)
        .map(|(d, r)| {
            let x = d * r.conj();
            let m = x.norm();
            if m > 1e-12 {
                x / m
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    fft2(&mut cross, h, w, true);
    let (mut best, mut best_idx) = (f64::NEG_INFINITY, 0);
    for (i, v) in cross.iter().enumerate() {
        if v.re > best {
            best = v.re;
            best_idx = i;
        }
    }
    Ok((
        wrap_shift((best_idx / w) as i64, h as i64),
        wrap_shift((best_idx % w) as i64, w as i64),
    ))
}

/// Map an index in `[0, n)` to the signed range `[-n/2, n/2)`.
pub fn wrap_shift(i: i64, n: i64) -> i64 {
    let i = i.rem_euclid(n);
    if i >= n - n / 2 {
        i - n
    } else {
        i
    }
}

/// Circularly shift `img` by `shift`.
pub fn register(img: &SemImage, shift: (i64, i64)) -> SemImage {
    SemImage {
        height: img.height,
        width: img.width,
        pixels: circular_shift(&img.pixels, img.height, img.width, shift.0, shift.1),
        seed: img.seed,
    }
}

/// Register `reference` onto `defect`.
pub fn align(reference: &SemImage, defect: &SemImage) -> Result<(SemImage, (i64, i64))> {
    let s = phase_correlate(reference, defect)?;
    Ok((register(reference, s), s))
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// `median(d) + k * 1.4826 * MAD(d)`.
pub fn robust_threshold(values: &[f64], k_sigma: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let med = median(&v);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    dev.sort_by(|a, b| a.total_cmp(b));
    med + k_sigma * MAD_TO_SIGMA * median(&dev)
}

/// Difference-image detection. Pixels with `|def - ref|` strictly above the
/// robust threshold form blobs; each blob's score is `m / (m + t)` for its
/// mean difference `m` and threshold `t`.
pub fn diff_detect(aligned_ref: &SemImage, defect: &SemImage, k_sigma: f64, min_area: usize) -> Result<DetectOutcome> {
    if aligned_ref.shape() != defect.shape() {
        return Err(Error::shape(format!(
            "reference {:?} vs defect {:?}",
            aligned_ref.shape(),
            defect.shape()
        )));
    }
    let (h, w) = defect.shape();
    let d: Vec<f64> = defect
        .pixels
        .iter()
        .zip(&aligned_ref.pixels)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let t = robust_threshold(&d, k_sigma);
    let fg = DefectMask {
        height: h,
        width: w,
        labels: d.iter().map(|v| (*v > t) as u8).collect(),
    };
    let diff = ScoreMap::new(h, w, d)?;
    let mut out = DetectOutcome::default();
    for blob in connected_components(&fg) {
        let mut det = fit_ellipse(&blob, &diff);
        let m = blob.pixels.iter().map(|&(r, c)| diff.get(r, c)).sum::<f64>() / blob.area() as f64;
        det.score = (m / (m + t + 1e-12)).clamp(1e-9, 1.0 - 1e-9);
        if blob.area() < min_area {
            out.filtered.push(det);
        } else {
            out.detections.push(det);
        }
    }
    Ok(out)
}

/// Full baseline on one pair: register, then difference detection.
pub fn baseline(reference: &SemImage, defect: &SemImage, k_sigma: f64, min_area: usize) -> Result<DetectOutcome> {
    let (aligned, _) = align(reference, defect)?;
    diff_detect(&aligned, defect, k_sigma, min_area)
}
