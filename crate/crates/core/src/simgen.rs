//! Procedural SEM-like line patterns, particle implants and on-disk datasets.
//!
//! A background is a periodic square wave of bright lines on a darker floor,
//! optionally with per-edge roughness along the lines, blurred and overlaid
//! with Gaussian noise. Particles are additive Gaussian-smoothed disks.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{circular_shift, gaussian_blur, Border, DefectMask, SemImage};
use crate::rng;

const STREAM_ROUGHNESS: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_REF_NOISE: u64 = 3;
const STREAM_LAYOUT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Lines run left to right; intensity alternates down the rows.
    Horizontal,
    /// Lines run top to bottom; intensity alternates across the columns.
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub width: usize,
    pub height: usize,
    pub line_period: usize,
    pub line_width: usize,
    pub orientation: Orientation,
    pub fg_level: f64,
    pub bg_level: f64,
    pub noise_sigma: f64,
    pub edge_blur_sigma: f64,
    /// Standard deviation (pixels) of the smooth random wander of each line edge.
    #[serde(default)]
    pub edge_roughness: f64,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            line_period: 12,
            line_width: 5,
            orientation: Orientation::Vertical,
            fg_level: 0.7,
            bg_level: 0.3,
            noise_sigma: 0.03,
            edge_blur_sigma: 0.8,
            edge_roughness: 0.0,
        }
    }
}

impl PatternSpec {
    /// Extent of the axis along which the intensity alternates.
    fn alternation_extent(&self) -> usize {
        match self.orientation {
            Orientation::Vertical => self.width,
            Orientation::Horizontal => self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("image width and height must be positive"));
        }
        if !(0 < self.line_width && self.line_width < self.line_period) {
            return Err(Error::param(format!(
                "0 < line_width < line_period violated (line_width={}, line_period={})",
                self.line_width, self.line_period
            )));
        }
        if self.line_period > self.alternation_extent() {
            return Err(Error::param(format!(
                "line_period {} exceeds the image extent {} across the lines",
                self.line_period,
                self.alternation_extent()
            )));
        }
        if !(0.0 <= self.bg_level && self.bg_level < self.fg_level && self.fg_level <= 1.0) {
            return Err(Error::param(format!(
                "0 <= bg_level < fg_level <= 1 violated (bg_level={}, fg_level={})",
                self.bg_level, self.fg_level
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.edge_blur_sigma >= 0.0 && self.edge_blur_sigma.is_finite()) {
            return Err(Error::param(format!(
                "edge_blur_sigma must be >= 0, got {}",
                self.edge_blur_sigma
            )));
        }
        if !(self.edge_roughness >= 0.0 && self.edge_roughness.is_finite()) {
            return Err(Error::param(format!(
                "edge_roughness must be >= 0, got {}",
                self.edge_roughness
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    #[default]
    Particle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectSpec {
    #[serde(default)]
    pub kind: DefectKind,
    /// Subpixel (row, col) of the particle center.
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity_delta: f64,
    pub softness_sigma: f64,
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub row0: i64,
    pub col0: i64,
    pub row1: i64,
    pub col1: i64,
}

impl Footprint {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as i64, col as i64);
        r >= self.row0 && r <= self.row1 && c >= self.col0 && c <= self.col1
    }
}

impl DefectSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::param(format!("defect radius must be > 0, got {}", self.radius)));
        }
        if !(self.softness_sigma >= 0.0 && self.softness_sigma.is_finite()) {
            return Err(Error::param(format!(
                "softness_sigma must be >= 0, got {}",
                self.softness_sigma
            )));
        }
        if !self.intensity_delta.is_finite() || !self.center.0.is_finite() || !self.center.1.is_finite() {
            return Err(Error::param("defect center and intensity must be finite"));
        }
        Ok(())
    }

    /// Pixel rectangle outside of which the additive profile is exactly zero.
    pub fn footprint(&self) -> Footprint {
        let margin = (3.0 * self.softness_sigma).ceil();
        let (r, c) = self.center;
        Footprint {
            row0: (r - self.radius).ceil() as i64 - margin as i64,
            col0: (c - self.radius).ceil() as i64 - margin as i64,
            row1: (r + self.radius).floor() as i64 + margin as i64,
            col1: (c + self.radius).floor() as i64 + margin as i64,
        }
    }

    /// Additive intensity profile over the footprint, row-major.
    fn profile(&self, fp: &Footprint) -> Vec<f64> {
        let h = (fp.row1 - fp.row0 + 1) as usize;
        let w = (fp.col1 - fp.col0 + 1) as usize;
        let mut disk = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let dr = (fp.row0 + i as i64) as f64 - self.center.0;
                let dc = (fp.col0 + j as i64) as f64 - self.center.1;
                if dr * dr + dc * dc <= self.radius * self.radius {
                    disk[i * w + j] = self.intensity_delta;
                }
            }
        }
        gaussian_blur(&disk, h, w, self.softness_sigma, Border::Zero)
    }
}

/// Noiseless pattern: square wave with edge roughness, then edge blur.
pub fn render_pattern(spec: &PatternSpec, seed: u64) -> Result<SemImage> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (along, across) = match spec.orientation {
        Orientation::Vertical => (h, w),
        Orientation::Horizontal => (w, h),
    };
    let period = spec.line_period as i64;
    let n_lines = across / spec.line_period + 2;
    // Edge offsets per line, per position along the line.
    let mut edges = vec![(0.0f64, 0.0f64); n_lines * along];
    if spec.edge_roughness > 0.0 {
        let mut rng = rng::seeded(rng::derive(seed, STREAM_ROUGHNESS));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let corr = 3.0;
        for line in 0..n_lines {
            let mut sides = [vec![0.0; along], vec![0.0; along]];
            for side in sides.iter_mut() {
                let raw: Vec<f64> = (0..along).map(|_| normal.sample(&mut rng)).collect();
                let smooth = gaussian_blur(&raw, 1, along, corr, Border::Clamp);
                let mean = smooth.iter().sum::<f64>() / along as f64;
                let var = smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / along as f64;
                let scale = if var > 0.0 { spec.edge_roughness / var.sqrt() } else { 0.0 };
                for (dst, v) in side.iter_mut().zip(&smooth) {
                    *dst = (v - mean) * scale;
                }
            }
            for t in 0..along {
                edges[line * along + t] = (sides[0][t], sides[1][t]);
            }
        }
    }
    let mut pixels = vec![spec.bg_level; h * w];
    for t in 0..along {
        for line in 0..n_lines {
            let (dl, dr) = edges[line * along + t];
            let start = (line as i64 * period) as f64 + dl;
            let end = (line as i64 * period + spec.line_width as i64) as f64 + dr;
            let lo = start.ceil().max(0.0) as usize;
            let hi = (end.ceil().max(0.0) as usize).min(across);
            for u in lo..hi {
                let idx = match spec.orientation {
                    Orientation::Vertical => t * w + u,
                    Orientation::Horizontal => u * w + t,
                };
                pixels[idx] = spec.fg_level;
            }
        }
    }
    let pixels = gaussian_blur(&pixels, h, w, spec.edge_blur_sigma, Border::Clamp);
    Ok(SemImage::from_clipped(h, w, pixels, seed))
}

/// Add i.i.d. Gaussian noise and clip into `[0, 1]`.
pub fn add_noise(img: &SemImage, sigma: f64, seed: u64) -> SemImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let mut rng = rng::seeded(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let pixels = img.pixels.iter().map(|v| v + normal.sample(&mut rng)).collect();
    SemImage::from_clipped(img.height, img.width, pixels, img.seed)
}

/// Clean background: [`render_pattern`] plus noise, deterministic in `(spec, seed)`.
pub fn gen_background(spec: &PatternSpec, seed: u64) -> Result<SemImage> {
    let clean = render_pattern(spec, seed)?;
    Ok(add_noise(&clean, spec.noise_sigma, rng::derive(seed, STREAM_NOISE)))
}

/// Implant a particle. The mask marks pixels where the additive profile
/// exceeds half of its peak magnitude; pixels outside the footprint are untouched.
///
/// Particles are deterministic; `seed` is accepted for defect kinds with
/// stochastic appearance and only tags the output.
pub fn implant_defect(img: &SemImage, defect: &DefectSpec, seed: u64) -> Result<(SemImage, DefectMask)> {
    defect.validate()?;
    let fp = defect.footprint();
    if fp.row0 < 0 || fp.col0 < 0 || fp.row1 >= img.height as i64 || fp.col1 >= img.width as i64 {
        return Err(Error::param(format!(
            "defect footprint rows {}..={} cols {}..={} outside {}x{} image",
            fp.row0, fp.row1, fp.col0, fp.col1, img.height, img.width
        )));
    }
    let profile = defect.profile(&fp);
    let peak = profile.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fw = (fp.col1 - fp.col0 + 1) as usize;
    let mut out = img.clone();
    out.seed = seed;
    let mut mask = DefectMask::zeros(img.height, img.width);
    if peak == 0.0 {
        return Ok((out, mask));
    }
    for (k, p) in profile.iter().enumerate() {
        let row = fp.row0 as usize + k / fw;
        let col = fp.col0 as usize + k % fw;
        if *p != 0.0 {
            out.set(row, col, (img.get(row, col) + p).clamp(0.0, 1.0));
        }
        if p.abs() > 0.5 * peak {
            mask.set(row, col, true);
        }
    }
    Ok((out, mask))
}

/// Inclusive `[min, max]` interval sampled uniformly.
pub type Interval = [f64; 2];

fn sample_interval(rng: &mut rng::Rng, iv: Interval) -> f64 {
    if iv[1] > iv[0] {
        rng.random_range(iv[0]..=iv[1])
    } else {
        iv[0]
    }
}

/// Distribution over background patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternRanges {
    pub line_period: [usize; 2],
    /// Line width as a fraction of the period.
    pub line_fraction: Interval,
    pub orientations: Vec<Orientation>,
    pub fg_level: Interval,
    pub bg_level: Interval,
    pub noise_sigma: Interval,
    pub edge_blur_sigma: Interval,
    pub edge_roughness: Interval,
}

impl Default for PatternRanges {
    fn default() -> Self {
        Self {
            line_period: [10, 16],
            line_fraction: [0.35, 0.55],
            orientations: vec![Orientation::Vertical, Orientation::Horizontal],
            fg_level: [0.6, 0.75],
            bg_level: [0.2, 0.35],
            noise_sigma: [0.02, 0.04],
            edge_blur_sigma: [0.6, 1.0],
            edge_roughness: [0.3, 0.6],
        }
    }
}

/// Distribution over implanted particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefectRanges {
    pub count: [usize; 2],
    pub radius: Interval,
    /// Signed additive intensity; lower magnitudes give harder particles.
    pub intensity_delta: Interval,
    pub softness_sigma: Interval,
}

impl Default for DefectRanges {
    fn default() -> Self {
        Self {
            count: [1, 2],
            radius: [2.5, 4.5],
            intensity_delta: [0.35, 0.5],
            softness_sigma: [0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub pattern: PatternRanges,
    pub defects: DefectRanges,
    /// Also emit a shifted, independently noised reference for every training image.
    pub train_references: bool,
    /// Maximum absolute circular shift (pixels, per axis) between reference and image.
    pub max_reference_shift: i64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            test_count: 50,
            height: 256,
            width: 256,
            seed: 1,
            pattern: PatternRanges::default(),
            defects: DefectRanges::default(),
            train_references: false,
            max_reference_shift: 6,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.pattern;
        if p.line_period[0] < 2 || p.line_period[0] > p.line_period[1] {
            return Err(Error::param("pattern.line_period must be an interval with min >= 2"));
        }
        if p.orientations.is_empty() {
            return Err(Error::param("pattern.orientations must not be empty"));
        }
        if p.fg_level[0] <= p.bg_level[1] {
            return Err(Error::param("pattern.fg_level must lie above pattern.bg_level"));
        }
        for (name, iv) in [
            ("line_fraction", p.line_fraction),
            ("fg_level", p.fg_level),
            ("bg_level", p.bg_level),
            ("noise_sigma", p.noise_sigma),
            ("edge_blur_sigma", p.edge_blur_sigma),
            ("edge_roughness", p.edge_roughness),
            ("radius", self.defects.radius),
            ("intensity_delta", self.defects.intensity_delta),
            ("softness_sigma", self.defects.softness_sigma),
        ] {
            if !(iv[0].is_finite() && iv[1].is_finite() && iv[0] <= iv[1]) {
                return Err(Error::param(format!("{name} must be a finite [min, max] interval")));
            }
        }
        if self.defects.count[0] > self.defects.count[1] {
            return Err(Error::param("defects.count must be an interval"));
        }
        if self.defects.radius[0] <= 0.0 {
            return Err(Error::param("defects.radius must be positive"));
        }
        if p.line_period[1] > self.height.min(self.width) {
            return Err(Error::param("line period exceeds the image size"));
        }
        if self.max_reference_shift < 0 {
            return Err(Error::param("max_reference_shift must be >= 0"));
        }
        Ok(())
    }

    pub fn sample_pattern(&self, rng: &mut rng::Rng) -> PatternSpec {
        let p = &self.pattern;
        let period = rng.random_range(p.line_period[0]..=p.line_period[1]);
        let frac = sample_interval(rng, p.line_fraction);
        let line_width = ((frac * period as f64).round() as usize).clamp(1, period - 1);
        let orientation = p.orientations[rng.random_range(0..p.orientations.len())];
        PatternSpec {
            width: self.width,
            height: self.height,
            line_period: period,
            line_width,
            orientation,
            fg_level: sample_interval(rng, p.fg_level),
            bg_level: sample_interval(rng, p.bg_level),
            noise_sigma: sample_interval(rng, p.noise_sigma),
            edge_blur_sigma: sample_interval(rng, p.edge_blur_sigma),
            edge_roughness: sample_interval(rng, p.edge_roughness),
        }
    }

    /// Particles centered in the gaps between lines, mutually separated.
    pub fn sample_defects(&self, pattern: &PatternSpec, rng: &mut rng::Rng) -> Vec<DefectSpec> {
        let d = &self.defects;
        let count = rng.random_range(d.count[0]..=d.count[1]);
        let mut out: Vec<DefectSpec> = Vec::with_capacity(count);
        let (along, across) = match pattern.orientation {
            Orientation::Vertical => (pattern.height, pattern.width),
            Orientation::Horizontal => (pattern.width, pattern.height),
        };
        let gap_offset = pattern.line_width as f64 + (pattern.line_period - pattern.line_width) as f64 / 2.0 - 0.5;
        let n_gaps = across / pattern.line_period;
        let mut tries = 0;
        while out.len() < count && tries < 200 {
            tries += 1;
            let radius = sample_interval(rng, d.radius);
            let softness = sample_interval(rng, d.softness_sigma);
            let margin = radius + (3.0 * softness).ceil() + 2.0;
            let gap = rng.random_range(0..n_gaps.max(1));
            let u = gap as f64 * pattern.line_period as f64 + gap_offset;
            let t = rng.random_range(margin..(along as f64 - margin).max(margin + 1.0));
            let center = match pattern.orientation {
                Orientation::Vertical => (t, u),
                Orientation::Horizontal => (u, t),
            };
            let spec = DefectSpec {
                kind: DefectKind::Particle,
                center,
                radius,
                intensity_delta: sample_interval(rng, d.intensity_delta),
                softness_sigma: softness,
            };
            let fp = spec.footprint();
            if fp.row0 < 0 || fp.col0 < 0 || fp.row1 >= pattern.height as i64 || fp.col1 >= pattern.width as i64 {
                continue;
            }
            let separated = out.iter().all(|o| {
                let dr = o.center.0 - center.0;
                let dc = o.center.1 - center.1;
                (dr * dr + dc * dc).sqrt() > 2.0 * (o.radius + radius) + 8.0
            });
            if separated {
                out.push(spec);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub pattern: PatternSpec,
    #[serde(default)]
    pub defects: Vec<DefectSpec>,
    /// Circular shift that maps the image's background onto its reference.
    #[serde(default)]
    pub reference_shift: Option<(i64, i64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub split: Split,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<PathBuf>,
    pub seed: u64,
    pub spec: SampleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    /// Paths in records are relative to the manifest's directory.
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Resolve a manifest-relative path.
pub fn resolve(manifest_path: &Path, rel: &Path) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(rel)
}

/// One generated sample before it is written.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub image: SemImage,
    pub mask: Option<DefectMask>,
    pub reference: Option<SemImage>,
    pub spec: SampleSpec,
}

/// Generate sample `index` of `split` in memory.
pub fn gen_sample(cfg: &DatasetConfig, split: Split, index: usize) -> Result<GeneratedSample> {
    let split_tag = match split {
        Split::Train => 0x7472,
        Split::Test => 0x7465,
    };
    let seed = rng::derive(rng::derive(cfg.seed, split_tag), index as u64);
    let mut layout = rng::seeded(rng::derive(seed, STREAM_LAYOUT));
    let pattern = cfg.sample_pattern(&mut layout);
    let clean = render_pattern(&pattern, seed)?;
    let mut image = add_noise(&clean, pattern.noise_sigma, rng::derive(seed, STREAM_NOISE));
    let with_reference = split == Split::Test || cfg.train_references;
    let shift = if with_reference {
        let m = cfg.max_reference_shift;
        Some((layout.random_range(-m..=m), layout.random_range(-m..=m)))
    } else {
        None
    };
    let (mask, defects) = if split == Split::Test {
        let defects = cfg.sample_defects(&pattern, &mut layout);
        let mut mask = DefectMask::zeros(image.height, image.width);
        for d in &defects {
            let (next, m) = implant_defect(&image, d, seed)?;
            image = next;
            mask.union_with(&m);
        }
        (Some(mask), defects)
    } else {
        (None, Vec::new())
    };
    let reference = shift.map(|(dy, dx)| {
        let shifted = SemImage::from_clipped(
            clean.height,
            clean.width,
            circular_shift(&clean.pixels, clean.height, clean.width, dy, dx),
            seed,
        );
        add_noise(&shifted, pattern.noise_sigma, rng::derive(seed, STREAM_REF_NOISE))
    });
    image.seed = seed;
    Ok(GeneratedSample {
        image,
        mask,
        reference,
        spec: SampleSpec {
            pattern,
            defects,
            reference_shift: shift,
        },
    })
}

/// Write the train split (clean backgrounds) and the test split (particle
/// images with masks and references) plus `manifest.json` into `out_dir`.
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(cfg.train_count + cfg.test_count);
    for (split, count, prefix) in [
        (Split::Train, cfg.train_count, "train"),
        (Split::Test, cfg.test_count, "test"),
    ] {
        for i in 0..count {
            let sample = gen_sample(cfg, split, i)?;
            let image_path = PathBuf::from(format!("{prefix}/{prefix}_{i:04}.png"));
            sample.image.save_png(&out_dir.join(&image_path))?;
            let mask_path = match &sample.mask {
                Some(m) => {
                    let p = PathBuf::from(format!("{prefix}/{prefix}_{i:04}_mask.png"));
                    m.save_png(&out_dir.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            let reference_path = match &sample.reference {
                Some(r) => {
                    let p = PathBuf::from(format!("{prefix}/{prefix}_{i:04}_ref.png"));
                    r.save_png(&out_dir.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            records.push(ManifestRecord {
                split,
                image_path,
                mask_path,
                reference_path,
                seed: sample.image.seed,
                spec: sample.spec,
            });
        }
    }
    let manifest = Manifest {
        version: 1,
        config: cfg.clone(),
        records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// SHA-256 over the manifest bytes followed by every referenced file, in record order.
pub fn manifest_digest(manifest_path: &Path) -> Result<String> {
    let manifest = Manifest::load(manifest_path)?;
    let mut hasher = Sha256::new();
    hasher.update(std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?);
    for rec in &manifest.records {
        for rel in std::iter::once(&rec.image_path)
            .chain(rec.mask_path.iter())
            .chain(rec.reference_path.iter())
        {
            let p = resolve(manifest_path, rel);
            hasher.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(period: usize, line_width: usize, orientation: Orientation) -> PatternSpec {
        PatternSpec {
            width: 32,
            height: 24,
            line_period: period,
            line_width,
            orientation,
            fg_level: 0.8,
            bg_level: 0.2,
            noise_sigma: 0.0,
            edge_blur_sigma: 0.0,
            edge_roughness: 0.0,
        }
    }

    #[test]
    fn square_wave_vertical() {
        let img = gen_background(&noiseless(8, 4, Orientation::Vertical), 3).unwrap();
        for r in 0..img.height {
            for c in 0..img.width {
                let want = if c % 8 < 4 { 0.8 } else { 0.2 };
                assert_eq!(img.get(r, c), want, "({r},{c})");
            }
        }
    }

    #[test]
    fn square_wave_horizontal() {
        let img = gen_background(&noiseless(6, 2, Orientation::Horizontal), 3).unwrap();
        for r in 0..img.height {
            for c in 0..img.width {
                let want = if r % 6 < 2 { 0.8 } else { 0.2 };
                assert_eq!(img.get(r, c), want);
            }
        }
    }

    #[test]
    fn background_is_deterministic() {
        let spec = PatternSpec {
            edge_roughness: 0.5,
            ..PatternSpec::default()
        };
        let a = gen_background(&spec, 11).unwrap();
        let b = gen_background(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_background(&spec, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_std_is_calibrated() {
        let spec = PatternSpec {
            noise_sigma: 0.05,
            ..PatternSpec::default()
        };
        let noisy = gen_background(&spec, 5).unwrap();
        let clean = render_pattern(&spec, 5).unwrap();
        let diff: Vec<f64> = noisy.pixels.iter().zip(&clean.pixels).map(|(a, b)| a - b).collect();
        assert!(diff.len() >= 65_536);
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diff.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((sd - 0.05).abs() <= 0.005, "std {sd}");
    }

    #[test]
    fn invalid_specs_name_the_invariant() {
        let mut s = noiseless(8, 8, Orientation::Vertical);
        let err = gen_background(&s, 0).unwrap_err().to_string();
        assert!(err.contains("line_width < line_period"), "{err}");
        s.line_width = 3;
        s.bg_level = 0.9;
        let err = gen_background(&s, 0).unwrap_err().to_string();
        assert!(err.contains("bg_level < fg_level"), "{err}");
        s.bg_level = 0.1;
        s.noise_sigma = -1.0;
        assert!(gen_background(&s, 0).unwrap_err().to_string().contains("noise_sigma"));
        s.noise_sigma = 0.0;
        s.line_period = 40;
        s.line_width = 3;
        assert!(gen_background(&s, 0).unwrap_err().to_string().contains("line_period"));
    }

    #[test]
    fn null_defect_is_identity() {
        let img = gen_background(&PatternSpec::default(), 1).unwrap();
        let d = DefectSpec {
            kind: DefectKind::Particle,
            center: (100.0, 100.0),
            radius: 4.0,
            intensity_delta: 0.0,
            softness_sigma: 1.0,
        };
        let (out, mask) = implant_defect(&img, &d, 9).unwrap();
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn hard_disk_mask_matches_enumeration() {
        let img = SemImage::filled(100, 100, 0.3);
        let d = DefectSpec {
            kind: DefectKind::Particle,
            center: (50.0, 50.0),
            radius: 3.0,
            intensity_delta: 0.4,
            softness_sigma: 0.0,
        };
        let (_, mask) = implant_defect(&img, &d, 0).unwrap();
        let mut expected = 0;
        for r in 0..100i64 {
            for c in 0..100i64 {
                if ((r - 50).pow(2) + (c - 50).pow(2)) as f64 <= 9.0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 29);
        assert_eq!(mask.count(), expected);
    }

    #[test]
    fn implant_is_local_and_clipped() {
        let img = gen_background(&PatternSpec::default(), 2).unwrap();
        let d = DefectSpec {
            kind: DefectKind::Particle,
            center: (60.3, 80.7),
            radius: 4.0,
            intensity_delta: 0.9,
            softness_sigma: 1.2,
        };
        let fp = d.footprint();
        let (out, mask) = implant_defect(&img, &d, 0).unwrap();
        for r in 0..img.height {
            for c in 0..img.width {
                let changed = out.get(r, c) != img.get(r, c);
                if changed {
                    assert!(fp.contains(r, c));
                }
                if mask.get(r, c) == 1 {
                    assert!(fp.contains(r, c));
                }
                assert!((0.0..=1.0).contains(&out.get(r, c)));
            }
        }
        assert!(mask.count() > 0);
    }

    #[test]
    fn footprint_outside_is_rejected() {
        let img = SemImage::filled(32, 32, 0.3);
        let d = DefectSpec {
            kind: DefectKind::Particle,
            center: (2.0, 16.0),
            radius: 3.0,
            intensity_delta: 0.4,
            softness_sigma: 0.0,
        };
        assert!(matches!(implant_defect(&img, &d, 0), Err(Error::Parameter(_))));
    }

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            train_count: 10,
            test_count: 5,
            height: 64,
            width: 64,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn dataset_cardinality_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_dataset(&small_cfg(), dir.path()).unwrap();
        assert_eq!(m.split(Split::Train).count(), 10);
        assert_eq!(m.split(Split::Test).count(), 5);
        let mp = dir.path().join(MANIFEST_FILE);
        let loaded = Manifest::load(&mp).unwrap();
        assert_eq!(loaded, m);
        for rec in &loaded.records {
            let img = SemImage::load_png(&resolve(&mp, &rec.image_path)).unwrap();
            assert_eq!(img.shape(), (rec.spec.pattern.height, rec.spec.pattern.width));
            match rec.split {
                Split::Train => assert!(rec.mask_path.is_none()),
                Split::Test => {
                    let mask = DefectMask::load_png(&resolve(&mp, rec.mask_path.as_ref().unwrap())).unwrap();
                    assert_eq!(mask.shape(), img.shape());
                    assert!(mask.count() > 0);
                    let r = SemImage::load_png(&resolve(&mp, rec.reference_path.as_ref().unwrap())).unwrap();
                    assert_eq!(r.shape(), img.shape());
                }
            }
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_dataset(&small_cfg(), a.path()).unwrap();
        gen_dataset(&small_cfg(), b.path()).unwrap();
        let da = manifest_digest(&a.path().join(MANIFEST_FILE)).unwrap();
        let db = manifest_digest(&b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(da, db);
        let mut other = small_cfg();
        other.seed = 99;
        let c = tempfile::tempdir().unwrap();
        gen_dataset(&other, c.path()).unwrap();
        assert_ne!(da, manifest_digest(&c.path().join(MANIFEST_FILE)).unwrap());
    }
}
