//! Orchestration: configuration, training, inference, evaluation and the
//! end-to-end experiment.

pub mod config;
pub mod experiment;
pub mod infer;
pub mod train;

pub use config::{Config, DataConfig, EvalConfig, LrSchedule, Mode, TrainConfig, CONFIG_VERSION, PRESETS};
pub use experiment::{ensure_dataset, load_summary, run_experiment, ExperimentSummary};
pub use infer::{evaluate_file, infer, run_baseline, Predictor};
pub use train::{train, RunRecord, StepRecord, TrainSet};
