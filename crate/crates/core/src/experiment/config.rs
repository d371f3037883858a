use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_csv, Dataset, Schema};
use crate::error::{Error, Result};
use crate::hpo::{SearchSpace, StudyConfig};
use crate::landscape::{GridSpec, GRID_MARGIN, GRID_SIDE, POINTS_1D};
use crate::nn::Task;
use crate::noise::{GradientNoiseOrder, NoiseSpec, TrainConfig, DEFAULT_BATCH_SIZE};
use crate::ood::CALIBRATION_SEED;

/// Environment variable naming the root for relative dataset paths.
pub const DATA_DIR_ENV: &str = "NOISEBENCH_DATA_DIR";

pub const DEFAULT_HIDDEN: [usize; 4] = [100, 100, 100, 100];
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_TRIALS: usize = 50;

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}
fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_true() -> bool {
    true
}
fn default_trials() -> usize {
    DEFAULT_TRIALS
}
fn default_calibration_seed() -> u64 {
    CALIBRATION_SEED
}
fn default_points() -> usize {
    POINTS_1D
}
fn default_side() -> usize {
    GRID_SIDE
}
fn default_margin() -> f64 {
    GRID_MARGIN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    /// Schema JSON file.
    pub schema: PathBuf,
    /// CSV file; defaults to the schema's `file` entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub l2_weight: f64,
    /// Task default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub l2_on_bias: bool,
    #[serde(default)]
    pub gradient_noise_order: GradientNoiseOrder,
    /// Store parameters after every epoch (needed by `landscape`).
    #[serde(default)]
    pub snapshot_every_epoch: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            base_lr: DEFAULT_LR,
            l2_weight: 0.0,
            clip_norm: None,
            l2_on_bias: false,
            gradient_noise_order: GradientNoiseOrder::BeforeClip,
            snapshot_every_epoch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodOptions {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Fixed scaling factor; skips calibration when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling_factor: Option<f64>,
    #[serde(default = "default_calibration_seed")]
    pub seed: u64,
}

impl Default for OodOptions {
    fn default() -> Self {
        OodOptions {
            enabled: true,
            scaling_factor: None,
            seed: CALIBRATION_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpoOptions {
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    /// Epochs per trial; the training epochs when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "default_true")]
    pub pruning: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_seeds")]
    pub retrain_seeds: Vec<u64>,
    /// Explicit search space; derived from the noise list when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SearchSpace>,
}

impl Default for HpoOptions {
    fn default() -> Self {
        HpoOptions {
            n_trials: DEFAULT_TRIALS,
            epochs: None,
            pruning: true,
            seed: 0,
            retrain_seeds: default_seeds(),
            space: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeOptions {
    #[serde(default = "default_points")]
    pub points_1d: usize,
    #[serde(default = "default_side")]
    pub grid_side: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_true")]
    pub anchor_origin: bool,
}

impl Default for LandscapeOptions {
    fn default() -> Self {
        LandscapeOptions {
            points_1d: POINTS_1D,
            grid_side: GRID_SIDE,
            margin: GRID_MARGIN,
            anchor_origin: true,
        }
    }
}

impl LandscapeOptions {
    pub fn grid(&self) -> GridSpec {
        GridSpec {
            side: self.grid_side,
            margin: self.margin,
            anchor_origin: self.anchor_origin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Method label used in reports; derived from the noise list when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub dataset: DatasetRef,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub noises: Vec<NoiseSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed of the train/validation/test split, shared by all runs.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub ood: OodOptions,
    #[serde(default)]
    pub hpo: HpoOptions,
    #[serde(default)]
    pub landscape: LandscapeOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(schema: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            method: None,
            dataset: DatasetRef {
                schema: schema.into(),
                data: None,
            },
            hidden: default_hidden(),
            train: TrainOptions::default(),
            noises: Vec::new(),
            seeds: default_seeds(),
            split_seed: 0,
            ood: OodOptions::default(),
            hpo: HpoOptions::default(),
            landscape: LandscapeOptions::default(),
            output: None,
        }
    }

    /// Parses JSON, reporting the path of the first offending field.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative dataset paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.schema);
        if let Some(d) = self.dataset.data.as_mut() {
            fix(d);
        }
    }

    fn config_err(path: &str, message: impl Into<String>) -> Error {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Self::config_err("hidden", "widths must be positive"));
        }
        if self.train.epochs == 0 {
            return Err(Self::config_err("train.epochs", "must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(Self::config_err("train.batch_size", "must be positive"));
        }
        if !(self.train.base_lr.is_finite() && self.train.base_lr >= 0.0) {
            return Err(Self::config_err("train.base_lr", "must be finite and >= 0"));
        }
        if !(self.train.l2_weight.is_finite() && self.train.l2_weight >= 0.0) {
            return Err(Self::config_err("train.l2_weight", "must be finite and >= 0"));
        }
        if let Some(c) = self.train.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Self::config_err("train.clip_norm", "must be positive"));
            }
        }
        for (i, n) in self.noises.iter().enumerate() {
            n.validate()
                .map_err(|e| Self::config_err(&format!("noises[{i}]"), e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return Err(Self::config_err("seeds", "at least one seed is required"));
        }
        if let Some(s) = self.ood.scaling_factor {
            if !(s.is_finite() && s > 0.0) {
                return Err(Self::config_err("ood.scaling_factor", "must be positive"));
            }
        }
        if self.hpo.n_trials == 0 {
            return Err(Self::config_err("hpo.n_trials", "must be positive"));
        }
        if self.hpo.epochs == Some(0) {
            return Err(Self::config_err("hpo.epochs", "must be positive"));
        }
        if let Some(space) = &self.hpo.space {
            space
                .validate()
                .map_err(|e| Self::config_err("hpo.space", e.to_string()))?;
        }
        if self.landscape.points_1d < 2 || self.landscape.grid_side < 2 {
            return Err(Self::config_err("landscape", "need at least 2 points per axis"));
        }
        if !(self.landscape.margin.is_finite() && self.landscape.margin >= 0.0) {
            return Err(Self::config_err("landscape.margin", "must be >= 0"));
        }
        Ok(())
    }

    pub fn method_name(&self) -> String {
        match &self.method {
            Some(m) => m.clone(),
            None if self.noises.is_empty() => "no_noise".into(),
            None => self.noises.iter().map(|n| n.noise.name()).collect::<Vec<_>>().join("+"),
        }
    }

    pub fn train_config(&self, task: Task, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            l2_weight: t.l2_weight,
            clip_norm: t.clip_norm.unwrap_or_else(|| TrainConfig::default_clip_norm(task)),
            seed,
            noises: self.noises.clone(),
            snapshot_every_epoch: t.snapshot_every_epoch,
            l2_on_bias: t.l2_on_bias,
            gradient_noise_order: t.gradient_noise_order,
        }
    }

    /// Copies tuned training values back into the experiment fields.
    pub fn with_train_config(&self, tc: &TrainConfig) -> ExperimentConfig {
        let mut out = self.clone();
        out.train.base_lr = tc.base_lr;
        out.train.l2_weight = tc.l2_weight;
        out.noises = tc.noises.clone();
        out
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            n_trials: self.hpo.n_trials,
            epochs: self.hpo.epochs.unwrap_or(self.train.epochs),
            pruning: self.hpo.pruning,
            seed: self.hpo.seed,
            retrain_seeds: self.hpo.retrain_seeds.clone(),
        }
    }

    pub fn search_space(&self, task: Task) -> SearchSpace {
        self.hpo
            .space
            .clone()
            .unwrap_or_else(|| SearchSpace::default_for(&self.train_config(task, 0)))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let schema = Schema::from_json_file(&self.dataset.schema)?;
        let data = match (&self.dataset.data, &schema.file) {
            (Some(p), _) => p.clone(),
            (None, Some(f)) => self
                .dataset
                .schema
                .parent()
                .map(|d| d.join(f))
                .unwrap_or_else(|| PathBuf::from(f)),
            (None, None) => {
                return Err(Self::config_err(
                    "dataset.data",
                    "no CSV path given and the schema names no file",
                ))
            }
        };
        load_csv(&data, &schema)
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
