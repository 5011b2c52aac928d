use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semdefect::evalkit::{emit_plot, PrCurve};
use semdefect::pipeline::infer::{infer_records, Predictor, DETECTIONS_FILE};
use semdefect::pipeline::{self, Config, StepRecord};
use semdefect::simgen::{gen_dataset, manifest_digest, Manifest, ManifestRecord, Split};
use semdefect::{Error, Result, SemImage};
use serde_json::json;

#[derive(Parser)]
#[command(name = "semdefect", version, about = "SEM defect detection trained on clean backgrounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (clean train split, particle test split).
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on a dataset manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print every n-th step record to stdout (all steps go to the log file).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Run a checkpoint on a manifest split or on single images.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Single image instead of a manifest split (repeatable).
        #[arg(long)]
        image: Vec<PathBuf>,
        /// Reference for each `--image`, in order (ref-def checkpoints).
        #[arg(long)]
        reference: Vec<PathBuf>,
    },
    /// Classic reference-difference baseline on a manifest split.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Score a detections file against ground-truth masks.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Render a precision-recall CSV as SVG.
    PlotPr {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate (or reuse) data, train, infer, evaluate and plot.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Configuration sources, applied in order: preset or file, named flags, `--set`.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML config file (`version = 1`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset instead of the defaults.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override any config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// train.mode
    #[arg(long)]
    mode: Option<String>,
    /// train.steps
    #[arg(long)]
    steps: Option<usize>,
    /// train.batch_size
    #[arg(long)]
    batch_size: Option<usize>,
    /// train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// train.optimizer.learning_rate
    #[arg(long)]
    learning_rate: Option<f64>,
    /// train.manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// eval.threshold
    #[arg(long)]
    threshold: Option<f64>,
    /// eval.min_area
    #[arg(long)]
    min_area: Option<usize>,
    /// data.dir
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// out_dir
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn toml_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let base = match (&self.config, &self.preset) {
            (Some(p), _) => Config::load(p)?,
            (None, Some(name)) => Config::preset(name)?,
            (None, None) => Config::default(),
        };
        let path = |p: &Path| toml_str(&p.to_string_lossy());
        let mut o: Vec<String> = Vec::new();
        if let Some(v) = &self.mode {
            o.push(format!("train.mode={}", toml_str(v)));
        }
        if let Some(v) = self.steps {
            o.push(format!("train.steps={v}"));
        }
        if let Some(v) = self.batch_size {
            o.push(format!("train.batch_size={v}"));
        }
        if let Some(v) = self.seed {
            o.push(format!("train.seed={v}"));
        }
        if let Some(v) = self.learning_rate {
            o.push(format!("train.optimizer.learning_rate={v:?}"));
        }
        if let Some(v) = &self.manifest {
            o.push(format!("train.manifest={}", path(v)));
        }
        if let Some(v) = self.threshold {
            o.push(format!("eval.threshold={v:?}"));
        }
        if let Some(v) = self.min_area {
            o.push(format!("eval.min_area={v}"));
        }
        if let Some(v) = &self.data_dir {
            o.push(format!("data.dir={}", path(v)));
        }
        if let Some(v) = &self.out_dir {
            o.push(format!("out_dir={}", path(v)));
        }
        o.extend(self.set.iter().cloned());
        base.with_overrides(&o)
    }
}

fn log(event: &str, fields: serde_json::Value) {
    let mut obj = json!({ "event": event });
    if let (Some(m), serde_json::Value::Object(f)) = (obj.as_object_mut(), fields) {
        m.extend(f);
    }
    eprintln!("{obj}");
}

fn step_printer(every: usize) -> impl FnMut(&StepRecord) {
    move |r: &StepRecord| {
        if every > 0 && r.step.is_multiple_of(every) {
            println!("{}", serde_json::to_string(r).expect("record serializes"));
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { cfg } => {
            let c = cfg.resolve()?;
            let m = gen_dataset(&c.data.generate, &c.data.dir)?;
            let path = c.data.dir.join(semdefect::simgen::MANIFEST_FILE);
            log(
                "generated",
                json!({
                    "manifest": path,
                    "train": m.split(Split::Train).count(),
                    "test": m.split(Split::Test).count(),
                    "digest": manifest_digest(&path)?,
                }),
            );
        }
        Command::Train { cfg, log_every } => {
            let c = cfg.resolve()?;
            let manifest = c.manifest_path();
            let out = c.out_dir.join("train");
            log("train_start", json!({ "mode": c.train.mode, "steps": c.train.steps, "manifest": manifest, "out": out }));
            let run = pipeline::train(&c.train, &manifest, &out, &mut step_printer(log_every))?;
            log(
                "train_done",
                json!({ "checkpoint": run.checkpoint, "wall_clock_s": run.wall_clock_s, "config_digest": run.config_digest }),
            );
        }
        Command::Infer { cfg, checkpoint, split, image, reference } => {
            let c = cfg.resolve()?;
            let out = c.out_dir.join("infer");
            if image.is_empty() {
                let preds = pipeline::infer(&checkpoint, &c.manifest_path(), split.into(), &c.eval, &out)?;
                let n: usize = preds.iter().map(|p| p.outcome.detections.len()).sum();
                log("infer_done", json!({ "images": preds.len(), "detections": n, "out": out.join(DETECTIONS_FILE) }));
            } else {
                infer_images(&checkpoint, &image, &reference, &c, &out)?;
            }
        }
        Command::Baseline { cfg, split } => {
            let c = cfg.resolve()?;
            let out = c.out_dir.join("baseline");
            let res = pipeline::run_baseline(&c.manifest_path(), split.into(), &c.eval, &out)?;
            let n: usize = res.iter().map(|(_, o)| o.detections.len()).sum();
            log("baseline_done", json!({ "images": res.len(), "detections": n, "out": out.join(DETECTIONS_FILE) }));
        }
        Command::Evaluate { cfg, detections, split } => {
            let c = cfg.resolve()?;
            let s = pipeline::evaluate_file(&detections, &c.manifest_path(), split.into(), &c.eval, &c.out_dir)?;
            println!("{}", serde_json::to_string(&s.metrics).expect("metrics serialize"));
        }
        Command::PlotPr { curve, out } => {
            let curve = PrCurve::read_csv(&curve)?;
            let marker = emit_plot(&curve, &out)?;
            log(
                "plot_written",
                json!({ "out": out, "max_recall": marker.map(|m| json!({"threshold": m.threshold, "precision": m.precision, "recall": m.recall})) }),
            );
        }
        Command::Experiment { cfg, log_every } => {
            let c = cfg.resolve()?;
            log("experiment_start", json!({ "mode": c.train.mode, "steps": c.train.steps, "out": c.out_dir }));
            let s = pipeline::run_experiment(&c, &mut step_printer(log_every))?;
            eprint!("{}", s.table());
            println!("{}", serde_json::to_string(&s).expect("summary serializes"));
        }
    }
    Ok(())
}

/// Inference on loose image files; ids are file stems.
fn infer_images(checkpoint: &Path, images: &[PathBuf], references: &[PathBuf], c: &Config, out: &Path) -> Result<()> {
    if !references.is_empty() && references.len() != images.len() {
        return Err(Error::config("give one --reference per --image, or none"));
    }
    let predictor = Predictor::load(checkpoint)?;
    // Build a throwaway manifest in the output directory so the regular path handles the files.
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let abs = |p: &Path| std::fs::canonicalize(p).map_err(|e| Error::io(p, e));
    let mut records = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let loaded = SemImage::load_png(img)?;
        let pattern = semdefect::simgen::PatternSpec {
            height: loaded.height,
            width: loaded.width,
            ..Default::default()
        };
        records.push(ManifestRecord {
            split: Split::Test,
            image_path: abs(img)?,
            mask_path: None,
            reference_path: references.get(i).map(|r| abs(r)).transpose()?,
            seed: 0,
            spec: semdefect::simgen::SampleSpec {
                pattern,
                defects: Vec::new(),
                reference_shift: None,
            },
        });
    }
    let manifest_path = out.join("inputs.json");
    let manifest = Manifest {
        version: 1,
        config: c.data.generate.clone(),
        records,
    };
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&manifest_path, e))?;
    let refs: Vec<&ManifestRecord> = manifest.records.iter().collect();
    let preds = infer_records(&predictor, &manifest_path, &refs, &c.eval, out)?;
    for p in preds {
        log("image", json!({ "id": p.image_id, "detections": p.outcome.detections.len() }));
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut chain = vec![e.to_string()];
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                chain.push(s.to_string());
                src = s.source();
            }
            log("error", json!({ "message": e.to_string(), "chain": chain }));
            ExitCode::FAILURE
        }
    }
}
