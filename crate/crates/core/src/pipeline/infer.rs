//! Inference, the classic baseline over a manifest split, and scoring of
//! detection files against ground-truth masks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::EvalConfig;
use crate::classic::{align, baseline};
use crate::detect::{detect, outcome_records, read_jsonl, write_jsonl, DetectOutcome, ScoreMap};
use crate::error::{Error, Result};
use crate::evalkit::{emit_metrics, evaluate, gt_regions, pr_curve, uniform_grid, ImageEval, Metrics, PrCurve};
use crate::image::{DefectMask, SemImage};
use crate::net::{load_checkpoint, Tensor, UNet};
use crate::simgen::{resolve, Manifest, ManifestRecord, Split};

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const PR_FILE: &str = "pr_curve.csv";
pub const PLOT_FILE: &str = "pr_curve.svg";

/// A network loaded for inference.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub net: UNet,
    pub source: PathBuf,
}

impl Predictor {
    pub fn load(checkpoint: &Path) -> Result<Predictor> {
        Ok(Predictor {
            net: load_checkpoint(checkpoint)?.net,
            source: checkpoint.to_path_buf(),
        })
    }

    pub fn needs_reference(&self) -> bool {
        self.net.config.in_channels == 2
    }

    /// Probability map of `image`. Two-channel models register `reference`
    /// onto the image first.
    pub fn predict(&self, image: &SemImage, reference: Option<&SemImage>) -> Result<ScoreMap> {
        let input = if self.needs_reference() {
            let r = reference.ok_or_else(|| {
                Error::config(format!(
                    "checkpoint {} was trained in ref-def mode and needs a reference image",
                    self.source.display()
                ))
            })?;
            let (aligned, _) = align(r, image)?;
            Tensor::from_images(&[image, &aligned])?
        } else {
            Tensor::from_images(&[image])?
        };
        let cfg = self.net.config;
        let out = self.net.forward_one(&input).map_err(|e| match e {
            Error::Shape(m) => Error::shape(format!(
                "{m}; checkpoint {} has depth {} (inputs must be multiples of {})",
                self.source.display(),
                cfg.depth,
                cfg.divisor()
            )),
            other => other,
        })?;
        ScoreMap::new(image.height, image.width, out.prob_map)
    }
}

/// Identifier of a manifest record: its image path without extension,
/// reduced to plain components so it always nests under an output directory.
pub fn image_id(rec: &ManifestRecord) -> String {
    rec.image_path
        .with_extension("")
        .components()
        .filter_map(|c| match c {
            std::path::Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub image_id: String,
    pub prob: ScoreMap,
    pub outcome: DetectOutcome,
}

fn save_prob(map: &ScoreMap, path: &Path) -> Result<()> {
    SemImage::from_clipped(map.height, map.width, map.values.clone(), 0).save_png(path)
}

/// Run `predictor` over the records, writing `prob/<id>.png` and
/// `detections.jsonl` into `out_dir`.
pub fn infer_records(
    predictor: &Predictor,
    manifest_path: &Path,
    records: &[&ManifestRecord],
    eval: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<Prediction>> {
    let mut preds = Vec::with_capacity(records.len());
    let mut lines = Vec::new();
    for rec in records {
        let image = SemImage::load_png(&resolve(manifest_path, &rec.image_path))?;
        let reference = match (&rec.reference_path, predictor.needs_reference()) {
            (Some(p), true) => Some(SemImage::load_png(&resolve(manifest_path, p))?),
            _ => None,
        };
        let prob = predictor.predict(&image, reference.as_ref())?;
        let outcome = detect(&prob, eval.threshold, eval.min_area);
        let id = image_id(rec);
        save_prob(&prob, &out_dir.join("prob").join(format!("{id}.png")))?;
        lines.extend(outcome_records(&id, &outcome));
        preds.push(Prediction {
            image_id: id,
            prob,
            outcome,
        });
    }
    write_jsonl(&out_dir.join(DETECTIONS_FILE), &lines)?;
    Ok(preds)
}

pub fn infer(checkpoint: &Path, manifest_path: &Path, split: Split, eval: &EvalConfig, out_dir: &Path) -> Result<Vec<Prediction>> {
    let predictor = Predictor::load(checkpoint)?;
    let manifest = Manifest::load(manifest_path)?;
    let records: Vec<&ManifestRecord> = manifest.split(split).collect();
    infer_records(&predictor, manifest_path, &records, eval, out_dir)
}

/// Classic registration + difference baseline over a split; writes
/// `detections.jsonl` into `out_dir`.
pub fn run_baseline(manifest_path: &Path, split: Split, eval: &EvalConfig, out_dir: &Path) -> Result<Vec<(String, DetectOutcome)>> {
    let manifest = Manifest::load(manifest_path)?;
    let mut out = Vec::new();
    let mut lines = Vec::new();
    for rec in manifest.split(split) {
        let rel = rec.reference_path.as_ref().ok_or_else(|| {
            Error::config(format!("{} has no reference image", rec.image_path.display()))
        })?;
        let image = SemImage::load_png(&resolve(manifest_path, &rec.image_path))?;
        let reference = SemImage::load_png(&resolve(manifest_path, rel))?;
        let outcome = baseline(&reference, &image, eval.k_sigma, eval.min_area)?;
        let id = image_id(rec);
        lines.extend(outcome_records(&id, &outcome));
        out.push((id, outcome));
    }
    write_jsonl(&out_dir.join(DETECTIONS_FILE), &lines)?;
    Ok(out)
}

/// Pair detection outcomes with the ground-truth masks of `split`.
/// Images without any detection lines count as having none.
pub fn collect_evals(manifest_path: &Path, split: Split, outcomes: &BTreeMap<String, DetectOutcome>) -> Result<Vec<ImageEval>> {
    let manifest = Manifest::load(manifest_path)?;
    let mut evals = Vec::new();
    for rec in manifest.split(split) {
        let gts = match &rec.mask_path {
            Some(p) => gt_regions(&DefectMask::load_png(&resolve(manifest_path, p))?),
            None => Vec::new(),
        };
        evals.push(ImageEval {
            outcome: outcomes.get(&image_id(rec)).cloned().unwrap_or_default(),
            gts,
        });
    }
    let known: std::collections::BTreeSet<String> = manifest.split(split).map(image_id).collect();
    if let Some(stray) = outcomes.keys().find(|k| !known.contains(*k)) {
        return Err(Error::config(format!("detections reference unknown image `{stray}`")));
    }
    Ok(evals)
}

pub fn outcomes_from_jsonl(path: &Path) -> Result<BTreeMap<String, DetectOutcome>> {
    let mut map: BTreeMap<String, DetectOutcome> = BTreeMap::new();
    for r in read_jsonl(path)? {
        let entry = map.entry(r.image_id.clone()).or_default();
        if r.filtered {
            entry.filtered.push(r.detection());
        } else {
            entry.detections.push(r.detection());
        }
    }
    Ok(map)
}

#[derive(Debug, Clone)]
pub struct Scored {
    pub metrics: Metrics,
    pub curve: PrCurve,
}

/// Metrics at the operating point plus the score sweep; writes
/// `metrics.json` and `pr_curve.csv` into `out_dir`.
pub fn score(evals: &[ImageEval], eval: &EvalConfig, out_dir: &Path) -> Result<Scored> {
    let report = evaluate(evals, &eval.criteria);
    let metrics = emit_metrics(&report, &out_dir.join(METRICS_FILE))?;
    let curve = pr_curve(evals, &eval.criteria, &uniform_grid(eval.pr_points))?;
    curve.write_csv(&out_dir.join(PR_FILE))?;
    Ok(Scored { metrics, curve })
}

/// Evaluate a detections file against a manifest split.
pub fn evaluate_file(detections: &Path, manifest_path: &Path, split: Split, eval: &EvalConfig, out_dir: &Path) -> Result<Scored> {
    let outcomes = outcomes_from_jsonl(detections)?;
    let evals = collect_evals(manifest_path, split, &outcomes)?;
    score(&evals, eval, out_dir)
}
