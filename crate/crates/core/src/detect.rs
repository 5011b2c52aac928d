//! Probability map to discrete detections: threshold, 4-connected
//! components, one moment-fitted ellipse per component.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::DefectMask;

/// Real-valued per-pixel map (probabilities or difference magnitudes).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// Pixels in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub mean_score: f64,
}

impl Blob {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Subpixel (row, col) centroid.
    pub center: (f64, f64),
    pub major_axis: f64,
    pub minor_axis: f64,
    /// Major-axis direction, radians in `[0, pi)`, 0 along the columns.
    pub angle: f64,
    pub score: f64,
    pub area: usize,
}

/// Detections of one map, plus the size-filtered candidates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectOutcome {
    pub detections: Vec<Detection>,
    pub filtered: Vec<Detection>,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_AREA: usize = 4;
const AXIS_FLOOR: f64 = 0.5;
const SCORE_EPS: f64 = 1e-9;

/// `1` where `value >= threshold`.
pub fn binarize(map: &ScoreMap, threshold: f64) -> DefectMask {
    DefectMask {
        height: map.height,
        width: map.width,
        labels: map.values.iter().map(|v| (*v >= threshold) as u8).collect(),
    }
}

/// Maximal 4-connected foreground sets ordered by their first raster pixel.
/// `mean_score` is left at zero; see [`connected_components_scored`].
pub fn connected_components(mask: &DefectMask) -> Vec<Blob> {
    let (h, w) = mask.shape();
    let mut seen = vec![false; h * w];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.labels[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            pixels.push((r, c));
            let mut visit = |n: usize| {
                if mask.labels[n] != 0 && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if r > 0 {
                visit(idx - w);
            }
            if r + 1 < h {
                visit(idx + w);
            }
            if c > 0 {
                visit(idx - 1);
            }
            if c + 1 < w {
                visit(idx + 1);
            }
        }
        pixels.sort_unstable();
        blobs.push(Blob {
            pixels,
            mean_score: 0.0,
        });
    }
    blobs
}

/// Components with their mean score over `map`.
pub fn connected_components_scored(mask: &DefectMask, map: &ScoreMap) -> Vec<Blob> {
    let mut blobs = connected_components(mask);
    for b in &mut blobs {
        b.mean_score = b.pixels.iter().map(|&(r, c)| map.get(r, c)).sum::<f64>() / b.area() as f64;
    }
    blobs
}

/// Centroid, second-moment ellipse and mean score of a blob.
pub fn fit_ellipse(blob: &Blob, map: &ScoreMap) -> Detection {
    let n = blob.area() as f64;
    let (mut sr, mut sc) = (0.0, 0.0);
    for &(r, c) in &blob.pixels {
        sr += r as f64;
        sc += c as f64;
    }
    let (mr, mc) = (sr / n, sc / n);
    let (mut vrr, mut vcc, mut vrc) = (0.0, 0.0, 0.0);
    for &(r, c) in &blob.pixels {
        let dr = r as f64 - mr;
        let dc = c as f64 - mc;
        vrr += dr * dr;
        vcc += dc * dc;
        vrc += dr * dc;
    }
    vrr /= n;
    vcc /= n;
    vrc /= n;
    // Snap rounding residue so symmetric blobs get a stable angle.
    let tol = 1e-12 * (vrr + vcc).max(1.0);
    if vrc.abs() < tol {
        vrc = 0.0;
    }
    if (vrr - vcc).abs() < tol {
        vcc = vrr;
    }
    let mean = 0.5 * (vrr + vcc);
    let disc = (0.25 * (vcc - vrr).powi(2) + vrc * vrc).sqrt();
    let l1 = (mean + disc).max(0.0);
    let l2 = (mean - disc).max(0.0);
    let mut angle = if disc == 0.0 { 0.0 } else { 0.5 * (2.0 * vrc).atan2(vcc - vrr) };
    if angle < 0.0 {
        angle += std::f64::consts::PI;
    }
    if angle >= std::f64::consts::PI {
        angle -= std::f64::consts::PI;
    }
    let score = blob.pixels.iter().map(|&(r, c)| map.get(r, c)).sum::<f64>() / n;
    Detection {
        center: (mr, mc),
        major_axis: (2.0 * l1.sqrt()).max(AXIS_FLOOR),
        minor_axis: (2.0 * l2.sqrt()).max(AXIS_FLOOR),
        angle,
        score: score.clamp(SCORE_EPS, 1.0 - SCORE_EPS),
        area: blob.area(),
    }
}

/// binarize, label, drop blobs smaller than `min_area` into `filtered`, fit ellipses.
pub fn detect(map: &ScoreMap, threshold: f64, min_area: usize) -> DetectOutcome {
    detect_mask(&binarize(map, threshold), map, min_area)
}

/// Same as [`detect`] with an already binarized foreground.
pub fn detect_mask(mask: &DefectMask, map: &ScoreMap, min_area: usize) -> DetectOutcome {
    let mut out = DetectOutcome::default();
    for blob in connected_components(mask) {
        let det = fit_ellipse(&blob, map);
        if blob.area() < min_area {
            out.filtered.push(det);
        } else {
            out.detections.push(det);
        }
    }
    out
}

/// One line of the detection JSON-lines format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub center: [f64; 2],
    /// `[major, minor]`
    pub axes: [f64; 2],
    pub angle: f64,
    pub score: f64,
    pub area: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub filtered: bool,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection, filtered: bool) -> Self {
        Self {
            image_id: image_id.to_string(),
            center: [d.center.0, d.center.1],
            axes: [d.major_axis, d.minor_axis],
            angle: d.angle,
            score: d.score,
            area: d.area,
            filtered,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            center: (self.center[0], self.center[1]),
            major_axis: self.axes[0],
            minor_axis: self.axes[1],
            angle: self.angle,
            score: self.score,
            area: self.area,
        }
    }
}

pub fn outcome_records(image_id: &str, outcome: &DetectOutcome) -> Vec<DetectionRecord> {
    outcome
        .detections
        .iter()
        .map(|d| DetectionRecord::new(image_id, d, false))
        .chain(outcome.filtered.iter().map(|d| DetectionRecord::new(image_id, d, true)))
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}
