//! One-command desk-scale experiment: data, training, inference, scoring.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Config, Mode};
use super::infer::{collect_evals, infer_records, run_baseline, score, Predictor, DETECTIONS_FILE, METRICS_FILE, PLOT_FILE, PR_FILE};
use super::train::{train, StepRecord};
use crate::detect::detect;
use crate::error::{Error, Result};
use crate::evalkit::{emit_plot, Metrics, PrCurve, PrPoint};
use crate::simgen::{gen_dataset, gen_sample, manifest_digest, Manifest, ManifestRecord, Split};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPaths {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub detections: PathBuf,
    pub metrics: PathBuf,
    pub pr_curve: PathBuf,
    pub plot: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub mode: Mode,
    pub train_steps: usize,
    pub batch_size: usize,
    pub model: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Metrics>,
    pub max_recall: Option<PrPoint>,
    /// Recall never increases with the score threshold along the sweep.
    pub recall_monotone: bool,
    pub final_loss: Option<StepRecord>,
    pub nonfinite_losses: usize,
    pub clean_images: usize,
    pub clean_detections: usize,
    pub train_wall_clock_s: f64,
    pub wall_clock_s: f64,
    pub config_digest: String,
    pub dataset_digest: String,
    pub paths: ExperimentPaths,
}

impl ExperimentSummary {
    /// Plain-text side-by-side table.
    pub fn table(&self) -> String {
        let row = |name: &str, m: &Metrics| {
            format!(
                "{name:<20} {:>9.3} {:>9.3} {:>9.3} {:>6} {:>6} {:>6}\n",
                m.precision, m.recall, m.f_measure, m.counts.hits, m.counts.misses, m.counts.false_alarms
            )
        };
        let mut s = format!(
            "{:<20} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}\n",
            "method", "precision", "recall", "F", "hits", "misses", "FA"
        );
        s += &row(&format!("net ({})", self.mode), &self.model);
        if let Some(b) = &self.baseline {
            s += &row("classic ref-def", b);
        }
        s
    }
}

fn recall_monotone(curve: &PrCurve) -> bool {
    curve.points.windows(2).all(|w| w[1].recall <= w[0].recall)
}

/// Reuse the dataset at `cfg.data.dir` when its manifest matches the
/// generator settings; otherwise generate it. An explicit `train.manifest`
/// is always used as is.
pub fn ensure_dataset(cfg: &Config) -> Result<PathBuf> {
    let path = cfg.manifest_path();
    if cfg.train.manifest.is_some() {
        Manifest::load(&path)?;
        return Ok(path);
    }
    if path.exists() {
        if let Ok(m) = Manifest::load(&path) {
            if m.config == cfg.data.generate {
                return Ok(path);
            }
        }
    }
    gen_dataset(&cfg.data.generate, &cfg.data.dir)?;
    Ok(path)
}

/// Run every stage; errors carry the stage name.
pub fn run_experiment(cfg: &Config, on_step: &mut dyn FnMut(&StepRecord)) -> Result<ExperimentSummary> {
    let start = Instant::now();
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let manifest_path = ensure_dataset(cfg).map_err(|e| e.in_stage("generate"))?;
    let dataset_digest = manifest_digest(&manifest_path).map_err(|e| e.in_stage("generate"))?;

    let run = train(&cfg.train, &manifest_path, &out.join("train"), on_step).map_err(|e| e.in_stage("train"))?;

    let manifest = Manifest::load(&manifest_path).map_err(|e| e.in_stage("infer"))?;
    let test: Vec<&ManifestRecord> = manifest.split(Split::Test).collect();
    let predictor = Predictor::load(&run.checkpoint).map_err(|e| e.in_stage("infer"))?;
    let infer_dir = out.join("infer");
    let preds = infer_records(&predictor, &manifest_path, &test, &cfg.eval, &infer_dir).map_err(|e| e.in_stage("infer"))?;

    let outcomes: BTreeMap<_, _> = preds.into_iter().map(|p| (p.image_id, p.outcome)).collect();
    let evals = collect_evals(&manifest_path, Split::Test, &outcomes).map_err(|e| e.in_stage("evaluate"))?;
    let scored = score(&evals, &cfg.eval, out).map_err(|e| e.in_stage("evaluate"))?;
    let plot = out.join(PLOT_FILE);
    emit_plot(&scored.curve, &plot).map_err(|e| e.in_stage("evaluate"))?;
    let max_recall = scored.curve.max_recall_index().map(|i| scored.curve.points[i]);

    let baseline = if cfg.eval.run_baseline {
        let dir = out.join("baseline");
        let b = run_baseline(&manifest_path, Split::Test, &cfg.eval, &dir).map_err(|e| e.in_stage("baseline"))?;
        let evals = collect_evals(&manifest_path, Split::Test, &b.into_iter().collect()).map_err(|e| e.in_stage("baseline"))?;
        Some(score(&evals, &cfg.eval, &dir).map_err(|e| e.in_stage("baseline"))?.metrics)
    } else {
        None
    };

    let clean_detections = clean_false_alarms(cfg, &predictor).map_err(|e| e.in_stage("clean"))?;

    let summary = ExperimentSummary {
        mode: cfg.train.mode,
        train_steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        model: scored.metrics,
        baseline,
        max_recall,
        recall_monotone: recall_monotone(&scored.curve),
        final_loss: run.steps.last().cloned(),
        nonfinite_losses: run.steps.iter().filter(|s| !s.total.is_finite()).count(),
        clean_images: cfg.eval.clean_images,
        clean_detections,
        train_wall_clock_s: run.wall_clock_s,
        wall_clock_s: start.elapsed().as_secs_f64(),
        config_digest: run.config_digest.clone(),
        dataset_digest,
        paths: ExperimentPaths {
            manifest: manifest_path,
            checkpoint: run.checkpoint,
            train_log: run.log,
            detections: infer_dir.join(DETECTIONS_FILE),
            metrics: out.join(METRICS_FILE),
            pr_curve: out.join(PR_FILE),
            plot,
        },
    };
    let path = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::format(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Detections on freshly generated clean backgrounds that were never part of
/// the training split.
fn clean_false_alarms(cfg: &Config, predictor: &Predictor) -> Result<usize> {
    let mut gen = cfg.data.generate.clone();
    gen.train_references = true;
    let mut count = 0;
    for i in 0..cfg.eval.clean_images {
        let s = gen_sample(&gen, Split::Train, gen.train_count + i)?;
        let prob = predictor.predict(&s.image, s.reference.as_ref())?;
        count += detect(&prob, cfg.eval.threshold, cfg.eval.min_area).detections.len();
    }
    Ok(count)
}

pub fn load_summary(path: &Path) -> Result<ExperimentSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}
