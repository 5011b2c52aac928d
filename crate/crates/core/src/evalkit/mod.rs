//! Detection evaluation: one-to-one matching of detections to ground-truth
//! regions, precision / recall / F-measure and threshold sweeps.

mod plot;

pub use plot::{emit_plot, PlotMarker};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::{connected_components, DetectOutcome, Detection};
use crate::error::{Error, Result};
use crate::image::DefectMask;

/// A ground-truth defect: one connected region of a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GtRegion {
    pub pixels: Vec<(usize, usize)>,
}

impl GtRegion {
    /// Euclidean distance from a point to the nearest region pixel (0 inside).
    pub fn distance_to(&self, p: (f64, f64)) -> f64 {
        self.pixels
            .iter()
            .map(|&(r, c)| ((r as f64 - p.0).powi(2) + (c as f64 - p.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    /// Fraction of region pixels inside the detection's ellipse.
    pub fn covered_fraction(&self, d: &Detection) -> f64 {
        let (a, b) = (0.5 * d.major_axis.max(1.0), 0.5 * d.minor_axis.max(1.0));
        let (sin, cos) = d.angle.sin_cos();
        let inside = self
            .pixels
            .iter()
            .filter(|&&(r, c)| {
                let dr = r as f64 - d.center.0;
                let dc = c as f64 - d.center.1;
                let u = dc * cos + dr * sin;
                let v = -dc * sin + dr * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
            .count();
        inside as f64 / self.pixels.len().max(1) as f64
    }
}

/// Ground-truth regions of a mask, one per 4-connected component.
pub fn gt_regions(mask: &DefectMask) -> Vec<GtRegion> {
    connected_components(mask)
        .into_iter()
        .map(|b| GtRegion { pixels: b.pixels })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatchCriteria {
    /// Hit when the detection center lies within this distance of the region.
    CenterDistance { max_center_distance: f64 },
    /// Hit when the detection ellipse covers at least this fraction of the region.
    MaskOverlap { min_mask_overlap: f64 },
}

impl Default for MatchCriteria {
    fn default() -> Self {
        MatchCriteria::CenterDistance {
            max_center_distance: 2.0,
        }
    }
}

impl MatchCriteria {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MatchCriteria::CenterDistance { max_center_distance } if !(max_center_distance > 0.0) => {
                Err(Error::param("max_center_distance must be > 0"))
            }
            MatchCriteria::MaskOverlap { min_mask_overlap } if !(min_mask_overlap > 0.0 && min_mask_overlap <= 1.0) => {
                Err(Error::param("min_mask_overlap must be in (0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Match quality if `d` qualifies for `gt` (higher is better).
    fn affinity(&self, d: &Detection, gt: &GtRegion) -> Option<f64> {
        match *self {
            MatchCriteria::CenterDistance { max_center_distance } => {
                let dist = gt.distance_to(d.center);
                (dist <= max_center_distance).then_some(-dist)
            }
            MatchCriteria::MaskOverlap { min_mask_overlap } => {
                let f = gt.covered_fraction(d);
                (f >= min_mask_overlap).then_some(f)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Assignment {
    Hit { gt: usize },
    FalseAlarm,
    Filtered,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub filtered: usize,
    /// Outcome per detection (detections first, then filtered candidates).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assignments: Vec<Assignment>,
}

impl MatchReport {
    /// Sum counts; per-detection assignments are not carried over.
    pub fn merge(&mut self, other: &MatchReport) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.false_alarms += other.false_alarms;
        self.filtered += other.filtered;
    }
}

/// Detections in descending score order; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one matching in descending score order: each detection takes
/// the best qualifying unassigned region.
pub fn match_detections(outcome: &DetectOutcome, gts: &[GtRegion], criteria: &MatchCriteria) -> MatchReport {
    let dets = &outcome.detections;
    let mut taken = vec![false; gts.len()];
    let mut assignments = vec![Assignment::FalseAlarm; dets.len()];
    let mut hits = 0;
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            if let Some(a) = criteria.affinity(&dets[i], gt) {
                if best.is_none_or(|(_, ba)| a > ba) {
                    best = Some((g, a));
                }
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            assignments[i] = Assignment::Hit { gt: g };
            hits += 1;
        }
    }
    assignments.extend(std::iter::repeat_n(Assignment::Filtered, outcome.filtered.len()));
    MatchReport {
        hits,
        misses: gts.len() - hits,
        false_alarms: dets.len() - hits,
        filtered: outcome.filtered.len(),
        assignments,
    }
}

/// `(P, R)`; precision is 1 without detections, recall is 1 without ground truth.
pub fn precision_recall(report: &MatchReport) -> (f64, f64) {
    let pd = report.hits + report.false_alarms;
    let rd = report.hits + report.misses;
    let p = if pd == 0 { 1.0 } else { report.hits as f64 / pd as f64 };
    let r = if rd == 0 { 1.0 } else { report.hits as f64 / rd as f64 };
    (p, r)
}

/// Harmonic mean `2PR / (P + R)`, 0 when both are 0.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub outcome: DetectOutcome,
    pub gts: Vec<GtRegion>,
}

/// Aggregate report over many images.
pub fn evaluate(images: &[ImageEval], criteria: &MatchCriteria) -> MatchReport {
    let mut total = MatchReport::default();
    for im in images {
        total.merge(&match_detections(&im.outcome, &im.gts, criteria));
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// Sorted by strictly increasing threshold.
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Index of the first point with maximal recall.
    pub fn max_recall_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, p) in self.points.iter().enumerate() {
            if best.is_none_or(|b| p.recall > self.points[b].recall) {
                best = Some(i);
            }
        }
        best
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("threshold,precision,recall\n");
        for p in &self.points {
            text.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<PrCurve> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            if vals.len() != 3 {
                return Err(Error::format(path, format!("line {}: expected 3 columns", n + 1)));
            }
            points.push(PrPoint {
                threshold: vals[0],
                precision: vals[1],
                recall: vals[2],
            });
        }
        Ok(PrCurve { points })
    }
}

/// Keep only detections scoring at least `t`.
fn at_threshold(outcome: &DetectOutcome, t: f64) -> DetectOutcome {
    DetectOutcome {
        detections: outcome.detections.iter().filter(|d| d.score >= t).cloned().collect(),
        filtered: outcome.filtered.iter().filter(|d| d.score >= t).cloned().collect(),
    }
}

/// Sweep score thresholds. Raising the threshold removes a suffix of the
/// score-ordered greedy sequence, so recall cannot increase along the curve.
pub fn pr_curve(images: &[ImageEval], criteria: &MatchCriteria, grid: &[f64]) -> Result<PrCurve> {
    criteria.validate()?;
    for w in grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::param("threshold grid must be strictly increasing"));
        }
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::param(format!("threshold {t} outside (0, 1)")));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        let mut total = MatchReport::default();
        for im in images {
            total.merge(&match_detections(&at_threshold(&im.outcome, t), &im.gts, criteria));
        }
        let (precision, recall) = precision_recall(&total);
        points.push(PrPoint {
            threshold: t,
            precision,
            recall,
        });
    }
    Ok(PrCurve { points })
}

/// Evenly spaced grid `1/(n+1), ..., n/(n+1)`.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub filtered: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub counts: Counts,
}

impl Metrics {
    pub fn from_report(report: &MatchReport) -> Self {
        let (precision, recall) = precision_recall(report);
        Metrics {
            precision,
            recall,
            f_measure: f_measure(precision, recall),
            counts: Counts {
                hits: report.hits,
                misses: report.misses,
                false_alarms: report.false_alarms,
                filtered: report.filtered,
            },
        }
    }
}

/// Write `{precision, recall, f_measure, counts}` as JSON.
pub fn emit_metrics(report: &MatchReport, path: &Path) -> Result<Metrics> {
    let m = Metrics::from_report(report);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(m)
}

pub fn load_metrics(path: &Path) -> Result<Metrics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn det(r: f64, c: f64, score: f64) -> Detection {
        Detection {
            center: (r, c),
            major_axis: 3.0,
            minor_axis: 3.0,
            angle: 0.0,
            score,
            area: 9,
        }
    }

    fn square(r0: usize, c0: usize, s: usize) -> GtRegion {
        GtRegion {
            pixels: (r0..r0 + s).flat_map(|r| (c0..c0 + s).map(move |c| (r, c))).collect(),
        }
    }

    fn outcome(dets: Vec<Detection>) -> DetectOutcome {
        DetectOutcome {
            detections: dets,
            filtered: vec![],
        }
    }

    #[test]
    fn basic_matches() {
        let c = MatchCriteria::default();
        let r = match_detections(&outcome(vec![det(11.0, 11.0, 0.9)]), &[square(10, 10, 3)], &c);
        assert_eq!((r.hits, r.misses, r.false_alarms), (1, 0, 0));
        let r = match_detections(&outcome(vec![]), &[square(0, 0, 2), square(9, 9, 2)], &c);
        assert_eq!((r.hits, r.misses, r.false_alarms), (0, 2, 0));
        let r = match_detections(&outcome(vec![det(11.0, 11.0, 0.9), det(10.0, 12.0, 0.7)]), &[square(10, 10, 3)], &c);
        assert_eq!((r.hits, r.misses, r.false_alarms), (1, 0, 1));
        assert_eq!(r.assignments[0], Assignment::Hit { gt: 0 });
        assert_eq!(r.assignments[1], Assignment::FalseAlarm);
    }

    #[test]
    fn dilation_radius_is_respected() {
        let c = MatchCriteria::default();
        let gt = [square(10, 10, 1)];
        assert_eq!(match_detections(&outcome(vec![det(12.0, 10.0, 0.5)]), &gt, &c).hits, 1);
        assert_eq!(match_detections(&outcome(vec![det(12.1, 10.0, 0.5)]), &gt, &c).hits, 0);
    }

    #[test]
    fn filtered_enter_neither_side() {
        let o = DetectOutcome {
            detections: vec![det(5.0, 5.0, 0.8)],
            filtered: vec![det(20.0, 20.0, 0.9), det(30.0, 30.0, 0.9)],
        };
        let r = match_detections(&o, &[square(5, 5, 1)], &MatchCriteria::default());
        assert_eq!((r.hits, r.misses, r.false_alarms, r.filtered), (1, 0, 0, 2));
        assert_eq!(precision_recall(&r), (1.0, 1.0));
    }

    #[test]
    fn overlap_mode() {
        let c = MatchCriteria::MaskOverlap { min_mask_overlap: 0.5 };
        let mut d = det(11.0, 11.0, 0.9);
        d.major_axis = 4.0;
        d.minor_axis = 4.0;
        assert_eq!(match_detections(&outcome(vec![d.clone()]), &[square(10, 10, 3)], &c).hits, 1);
        d.center = (20.0, 20.0);
        assert_eq!(match_detections(&outcome(vec![d]), &[square(10, 10, 3)], &c).hits, 0);
        assert!(MatchCriteria::MaskOverlap { min_mask_overlap: 1.5 }.validate().is_err());
        assert!(MatchCriteria::CenterDistance { max_center_distance: 0.0 }.validate().is_err());
    }

    /// Maximum matching size by exhaustive search over detection->gt choices.
    fn optimal_hits(dets: &[Detection], gts: &[GtRegion], c: &MatchCriteria) -> usize {
        fn go(i: usize, dets: &[Detection], gts: &[GtRegion], used: &mut Vec<bool>, c: &MatchCriteria) -> usize {
            if i == dets.len() {
                return 0;
            }
            let mut best = go(i + 1, dets, gts, used, c);
            for g in 0..gts.len() {
                if !used[g] && c.affinity(&dets[i], &gts[g]).is_some() {
                    used[g] = true;
                    best = best.max(1 + go(i + 1, dets, gts, used, c));
                    used[g] = false;
                }
            }
            best
        }
        go(0, dets, gts, &mut vec![false; gts.len()], c)
    }

    #[test]
    fn greedy_equals_optimal_on_small_instances() {
        let c = MatchCriteria::default();
        for seed in 0..300u64 {
            let mut rng = crate::rng::seeded(seed);
            // Compact defects on a coarse grid, so dilated regions never touch.
            let n_gt = rng.random_range(0..=4);
            let mut cells: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
            let mut gts = Vec::new();
            for _ in 0..n_gt {
                let k = rng.random_range(0..cells.len());
                let (i, j) = cells.swap_remove(k);
                gts.push(square(i * 12 + 2, j * 12 + 2, rng.random_range(1..=3)));
            }
            let n_det = rng.random_range(0..=4);
            let mut dets: Vec<Detection> = Vec::new();
            for _ in 0..n_det {
                dets.push(det(rng.random_range(0.0..48.0), rng.random_range(0.0..48.0), rng.random_range(0.01..0.99)));
            }
            for g in gts.iter().take(2) {
                dets.push(det(g.pixels[0].0 as f64 + 0.5, g.pixels[0].1 as f64, rng.random_range(0.01..0.99)));
            }
            dets.truncate(4);
            let r = match_detections(&outcome(dets.clone()), &gts, &c);
            assert_eq!(r.hits, optimal_hits(&dets, &gts, &c), "seed {seed}");
            assert_eq!(r.hits + r.misses, gts.len());
            assert_eq!(r.hits + r.false_alarms, dets.len());
        }
    }

    #[test]
    fn pr_examples() {
        let r = MatchReport {
            hits: 13,
            misses: 7,
            false_alarms: 7,
            filtered: 0,
            assignments: vec![],
        };
        let (p, rc) = precision_recall(&r);
        assert!((p - 0.65).abs() < 1e-12 && (rc - 0.65).abs() < 1e-12);
        let none = MatchReport {
            misses: 3,
            ..MatchReport::default()
        };
        assert_eq!(precision_recall(&none), (1.0, 0.0));
        let all = MatchReport {
            hits: 3,
            ..MatchReport::default()
        };
        assert_eq!(precision_recall(&all), (1.0, 1.0));
    }

    #[test]
    fn f_measure_examples() {
        let f = f_measure(0.84, 0.86);
        assert!((f - 0.84988235).abs() < 1e-6);
        assert_eq!((f * 100.0).round() / 100.0, 0.85);
        let f = f_measure(0.65, 0.64);
        assert!((f - 0.64496124).abs() < 1e-6);
        // The table reports two-digit P and R; over their rounding boxes F
        // spans an interval that reaches the reported 0.65.
        assert_eq!((f * 100.0).round() / 100.0, 0.64);
        let hi = f_measure(0.655, 0.645);
        assert!(f_measure(0.645, 0.635) < f && f < hi && hi >= 0.645);
        assert_eq!(f_measure(0.3, 0.3), 0.3);
        assert_eq!(f_measure(0.0, 0.0), 0.0);
    }

    #[test]
    fn f_measure_bounds() {
        for i in 0..=20 {
            for j in 0..=20 {
                let (p, r) = (i as f64 / 20.0, j as f64 / 20.0);
                let f = f_measure(p, r);
                assert_eq!(f, f_measure(r, p));
                if p + r > 0.0 {
                    assert!(p.min(r) <= f + 1e-12 && f <= 0.5 * (p + r) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn pr_curve_examples() {
        let images = vec![ImageEval {
            outcome: outcome(vec![det(5.0, 5.0, 0.5)]),
            gts: vec![square(5, 5, 1)],
        }];
        let c = MatchCriteria::default();
        let curve = pr_curve(&images, &c, &[0.1, 0.9]).unwrap();
        assert_eq!(
            curve.points,
            vec![
                PrPoint { threshold: 0.1, precision: 1.0, recall: 1.0 },
                PrPoint { threshold: 0.9, precision: 1.0, recall: 0.0 },
            ]
        );
        assert!(pr_curve(&images, &c, &[]).unwrap().points.is_empty());
        assert!(pr_curve(&images, &c, &[0.5, 0.5]).is_err());
        assert!(pr_curve(&images, &c, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn pr_recall_is_monotone() {
        let c = MatchCriteria::default();
        for seed in 0..100u64 {
            let mut rng = crate::rng::seeded(seed);
            let images: Vec<ImageEval> = (0..3)
                .map(|_| {
                    let gts: Vec<GtRegion> = (0..rng.random_range(0..4))
                        .map(|_| square(rng.random_range(0..30), rng.random_range(0..30), rng.random_range(1..4)))
                        .collect();
                    let dets = (0..rng.random_range(0..6))
                        .map(|_| det(rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(0.01..0.99)))
                        .collect();
                    ImageEval { outcome: outcome(dets), gts }
                })
                .collect();
            let curve = pr_curve(&images, &c, &uniform_grid(19)).unwrap();
            for w in curve.points.windows(2) {
                assert!(w[1].recall <= w[0].recall, "seed {seed}");
                assert!(w[1].threshold > w[0].threshold);
            }
        }
    }

    #[test]
    fn metrics_and_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let r = MatchReport {
            hits: 5,
            misses: 2,
            false_alarms: 1,
            filtered: 3,
            assignments: vec![],
        };
        let p = dir.path().join("m.json");
        let m = emit_metrics(&r, &p).unwrap();
        assert_eq!(load_metrics(&p).unwrap(), m);
        let (pp, rr) = precision_recall(&r);
        assert_eq!((m.precision, m.recall, m.f_measure), (pp, rr, f_measure(pp, rr)));

        let curve = PrCurve {
            points: vec![
                PrPoint { threshold: 0.25, precision: 0.5, recall: 0.75 },
                PrPoint { threshold: 0.5, precision: 0.8, recall: 0.5 },
            ],
        };
        let cp = dir.path().join("pr.csv");
        curve.write_csv(&cp).unwrap();
        assert_eq!(PrCurve::read_csv(&cp).unwrap(), curve);
    }
}
