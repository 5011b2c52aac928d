//! Versioned run configuration. Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{CopyPasteSpec, PhotometricSpec};
use crate::classic::DEFAULT_K_SIGMA;
use crate::detect::{DEFAULT_MIN_AREA, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::evalkit::MatchCriteria;
use crate::losses::LossConfig;
use crate::net::{AdamConfig, NetConfig};
use crate::simgen::{DatasetConfig, MANIFEST_FILE};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "wbce")]
    Wbce,
    #[serde(rename = "wbce+dclr")]
    WbceDclr,
    #[serde(rename = "wbce+consistency")]
    WbceConsistency,
    /// Defect image stacked with its registered reference.
    #[serde(rename = "ref-def")]
    RefDef,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Wbce => "wbce",
            Mode::WbceDclr => "wbce+dclr",
            Mode::WbceConsistency => "wbce+consistency",
            Mode::RefDef => "ref-def",
        }
    }

    pub fn uses_clr(self) -> bool {
        self == Mode::WbceDclr
    }

    pub fn uses_teacher(self) -> bool {
        self == Mode::WbceConsistency
    }

    pub fn uses_reference(self) -> bool {
        self == Mode::RefDef
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to `lr_final_fraction` of it.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Dataset manifest; defaults to `<data.dir>/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub lr_final_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Side of the square training crop taken from each background.
    pub crop: usize,
    pub copy_paste: CopyPasteSpec,
    /// Redraw a paste whose mean absolute change over the patch is below this
    /// (0 keeps every draw).
    pub min_paste_change: f64,
    /// Probability that a training crop gets no paste (empty mask).
    pub clean_fraction: f64,
    pub photometric: PhotometricSpec,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Prepared batches buffered between the data producer and the optimizer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Wbce,
            manifest: None,
            net: NetConfig::default(),
            loss: LossConfig {
                lambda_clr: 0.1,
                lambda_cons: 0.1,
                ..LossConfig::default()
            },
            optimizer: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            lr_final_fraction: 0.05,
            steps: 2000,
            batch_size: 4,
            crop: 64,
            copy_paste: CopyPasteSpec::default(),
            min_paste_change: 0.0,
            clean_fraction: 0.0,
            photometric: PhotometricSpec::default(),
            seed: 0,
            checkpoint_every: 0,
            queue_depth: 4,
        }
    }
}

impl TrainConfig {
    /// Loss coefficients with the terms the mode does not use switched off.
    pub fn effective_loss(&self) -> Result<LossConfig> {
        let mut l = self.loss.clone();
        if !self.mode.uses_clr() {
            l.lambda_clr = 0.0;
        } else if l.lambda_clr <= 0.0 {
            return Err(Error::config(format!("mode {} requires loss.lambda_clr > 0", self.mode)));
        }
        if !self.mode.uses_teacher() {
            l.lambda_cons = 0.0;
        } else if l.lambda_cons <= 0.0 {
            return Err(Error::config(format!("mode {} requires loss.lambda_cons > 0", self.mode)));
        }
        if l.lambda_bce <= 0.0 {
            return Err(Error::config("loss.lambda_bce must be > 0 in every mode"));
        }
        l.validate()?;
        Ok(l)
    }

    /// Learning rate used for the update at `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let base = self.optimizer.learning_rate;
        match self.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = if self.steps > 1 { step as f64 / (self.steps - 1) as f64 } else { 0.0 };
                let f = self.lr_final_fraction;
                base * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos()))
            }
        }
    }

    /// Network config with the input channel count the mode needs.
    pub fn effective_net(&self) -> NetConfig {
        NetConfig {
            in_channels: if self.mode.uses_reference() { 2 } else { 1 },
            ..self.net
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if self.mode.uses_clr() && self.batch_size < 2 {
            return Err(Error::config(format!(
                "mode {} requires train.batch_size >= 2, got {}",
                self.mode, self.batch_size
            )));
        }
        if self.queue_depth < 1 {
            return Err(Error::config("train.queue_depth must be >= 1"));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(Error::config("train.optimizer.learning_rate must be > 0"));
        }
        if !(self.min_paste_change >= 0.0 && self.min_paste_change.is_finite()) {
            return Err(Error::config("train.min_paste_change must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.clean_fraction) {
            return Err(Error::config("train.clean_fraction must be in [0, 1)"));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::config("train.lr_final_fraction must be in (0, 1]"));
        }
        let net = self.effective_net();
        net.validate()?;
        net.check_input(net.in_channels, self.crop, self.crop)
            .map_err(|e| Error::config(format!("train.crop: {e}")))?;
        self.copy_paste
            .validate(self.crop, self.crop)
            .map_err(|e| Error::config(format!("train.copy_paste: {e}")))?;
        self.photometric
            .validate()
            .map_err(|e| Error::config(format!("train.photometric: {e}")))?;
        self.effective_loss()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Probability threshold of the default operating point.
    pub threshold: f64,
    pub min_area: usize,
    pub criteria: MatchCriteria,
    /// Number of score thresholds in the precision-recall sweep.
    pub pr_points: usize,
    /// Robust-threshold multiplier of the classic baseline.
    pub k_sigma: f64,
    /// Also run the classic reference-difference baseline in `experiment`.
    pub run_baseline: bool,
    /// Held-out clean backgrounds used to count false alarms on defect-free images.
    pub clean_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_area: DEFAULT_MIN_AREA,
            criteria: MatchCriteria::default(),
            pr_points: 19,
            k_sigma: DEFAULT_K_SIGMA,
            run_baseline: false,
            clean_images: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("eval.threshold must be in (0, 1), got {}", self.threshold)));
        }
        if self.pr_points < 1 {
            return Err(Error::config("eval.pr_points must be >= 1"));
        }
        if !(self.k_sigma > 0.0) {
            return Err(Error::config("eval.k_sigma must be > 0"));
        }
        self.criteria.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding (or receiving) the generated dataset.
    pub dir: PathBuf,
    pub generate: DatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            generate: DatasetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Output directory for checkpoints, logs, predictions and reports.
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            out_dir: default_out(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_table(value)
    }

    fn from_table(table: toml::Table) -> Result<Config> {
        match table.get("version") {
            Some(toml::Value::Integer(v)) if *v == CONFIG_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::config(format!(
                    "unsupported config version {v}; expected {CONFIG_VERSION}"
                )))
            }
            None => return Err(Error::config(format!("missing `version = {CONFIG_VERSION}`"))),
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Config> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            let value = parse_literal(raw.trim());
            set_path(&mut table, key.trim(), value)?;
        }
        Self::from_table(table)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.train
            .manifest
            .clone()
            .unwrap_or_else(|| self.data.dir.join(MANIFEST_FILE))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generate.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Named desk-scale presets.
    pub fn preset(name: &str) -> Result<Config> {
        let mut c = Config::default();
        c.data.generate = DatasetConfig {
            height: 128,
            width: 128,
            ..DatasetConfig::default()
        };
        c.train.net = NetConfig {
            depth: 3,
            base_channels: 16,
            embed_dim: 16,
            ..NetConfig::default()
        };
        c.train.steps = 3000;
        c.train.batch_size = 4;
        c.train.optimizer.learning_rate = 2e-3;
        c.train.lr_schedule = LrSchedule::Cosine;
        c.train.min_paste_change = 0.1;
        c.train.clean_fraction = 0.25;
        c.eval.clean_images = 20;
        let mode = match name {
            "easy" => Mode::Wbce,
            "easy-dclr" => Mode::WbceDclr,
            "easy-consistency" => Mode::WbceConsistency,
            "ref-def" => {
                c.data.generate.train_references = true;
                c.eval.run_baseline = true;
                Mode::RefDef
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}`; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        c.train.mode = mode;
        c.data.dir = PathBuf::from(format!("runs/{name}/data"));
        c.out_dir = PathBuf::from(format!("runs/{name}"));
        Ok(c)
    }
}

pub const PRESETS: &[&str] = &["easy", "easy-dclr", "easy-consistency", "ref-def"];

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = Config::default();
        let back = Config::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn minimal_document() {
        let c = Config::from_toml_str("version = 1\n[train]\nmode = \"wbce+dclr\"\nsteps = 5\n").unwrap();
        assert_eq!(c.train.mode, Mode::WbceDclr);
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let e = Config::from_toml_str("version = 1\n[train]\nstepz = 5\n").unwrap_err();
        assert!(e.to_string().contains("stepz"), "{e}");
        assert!(Config::from_toml_str("version = 1\nextra = true\n").is_err());
        assert!(Config::from_toml_str("version = 2\n").unwrap_err().to_string().contains("version"));
        assert!(Config::from_toml_str("[train]\nsteps = 1\n").unwrap_err().to_string().contains("version"));
        assert!(Config::from_toml_str("version = 1\n[train.net]\ndepth = 3\nbogus = 1\n").is_err());
    }

    #[test]
    fn overrides() {
        let c = Config::default()
            .with_overrides(&["train.steps=7", "train.mode=ref-def", "eval.threshold=0.4", "out_dir=x/y", "train.net.depth=3"])
            .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.mode, Mode::RefDef);
        assert_eq!(c.eval.threshold, 0.4);
        assert_eq!(c.out_dir, PathBuf::from("x/y"));
        assert_eq!(c.train.net.depth, 3);
        assert!(Config::default().with_overrides(&["train.nope=1"]).is_err());
        assert!(Config::default().with_overrides(&["train.steps"]).is_err());
        assert!(Config::default().with_overrides(&["train.steps=\"many\""]).is_err());
    }

    #[test]
    fn mode_preconditions() {
        let mut t = TrainConfig {
            mode: Mode::WbceDclr,
            batch_size: 1,
            crop: 32,
            net: NetConfig { depth: 3, base_channels: 8, embed_dim: 4, ..NetConfig::default() },
            ..TrainConfig::default()
        };
        let e = t.validate().unwrap_err();
        assert!(matches!(e, Error::Config(_)) && e.to_string().contains("batch_size >= 2"), "{e}");
        t.batch_size = 2;
        t.validate().unwrap();
        t.crop = 30;
        assert!(t.validate().is_err());
        t.crop = 32;
        t.loss.lambda_clr = 0.0;
        assert!(t.validate().is_err());
        t.mode = Mode::Wbce;
        assert_eq!(t.effective_loss().unwrap().lambda_cons, 0.0);
        t.mode = Mode::RefDef;
        assert_eq!(t.effective_net().in_channels, 2);
    }

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            Config::preset(p).unwrap().validate().unwrap();
        }
        assert!(Config::preset("hard").is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut c = TrainConfig {
            steps: 11,
            lr_schedule: LrSchedule::Cosine,
            lr_final_fraction: 0.1,
            ..TrainConfig::default()
        };
        c.optimizer.learning_rate = 2e-3;
        assert_eq!(c.learning_rate_at(0), 2e-3);
        assert!((c.learning_rate_at(5) - 1.1e-3).abs() < 1e-12);
        assert!((c.learning_rate_at(10) - 2e-4).abs() < 1e-12);
        c.lr_schedule = LrSchedule::Constant;
        assert_eq!(c.learning_rate_at(7), 2e-3);
        c.lr_final_fraction = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
