//! Run configuration file (TOML). Unknown keys are rejected.
//!
//! ```toml
//! task = "forecast"        # or "impute"
//! horizon = 96             # forecast only
//! out = "runs/etth1"
//!
//! [data]
//! name = "ETTh1"           # registry or benchmark name
//! path = "ETT-small/ETTh1.csv"
//!
//! [model]
//! layers = 2
//! heads = 4
//! dim = 32
//! conv_count = 2           # or an explicit `convs` list
//! lookback = 96
//!
//! [train]
//! lr = 1e-3
//! batch_size = 8
//! seed = 0
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use tsrm::data::{self, Registry, SeriesDataset, SplitSpec, DATA_DIR_ENV};
use tsrm::model::{auto_conv_specs, ModelConfig};
use tsrm::nn::{AttentionKind, Conv1dSpec};
use tsrm::tasks::Task;
use tsrm::tensor::Scalar;
use tsrm::train::{Objective, TrainConfig};
use tsrm::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Forecast horizon H.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Imputation missing ratio r_m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_ratio: Option<Scalar>,
    /// Drop the outer `1/r_m` of the imputation loss.
    #[serde(default)]
    pub single_rm_weighting: bool,
    /// Window stride for training windows.
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

fn one() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub name: String,
    /// CSV file; relative paths resolve against `root`, then the
    /// `TSRM_DATA_DIR` environment variable, then the config's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Registry file mapping names to paths and splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    /// Overrides the registry split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    /// Global z-scoring with train statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Generated sum-of-sines data instead of a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub rows: usize,
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Explicit convolutions; generated from `conv_count` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convs: Option<Vec<Conv1dSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_count: Option<usize>,
    #[serde(default)]
    pub attention: AttentionKind,
    #[serde(default)]
    pub ifc: bool,
    #[serde(default = "yes")]
    pub merge_trainable: bool,
    #[serde(default = "default_dropout")]
    pub dropout: Scalar,
    pub lookback: usize,
    #[serde(default)]
    pub force_ranges: bool,
}

fn default_dropout() -> Scalar {
    0.1
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Checks the task-specific fields and returns the objective.
    pub fn objective(&self) -> Result<Objective> {
        match self.task {
            Task::Forecast => {
                if self.horizon.is_none_or(|h| h == 0) {
                    return Err(Error::Config("forecast runs need a positive `horizon`".into()));
                }
                if self.missing_ratio.is_some() {
                    return Err(Error::Config("`missing_ratio` only applies to impute runs".into()));
                }
                Ok(Objective::Forecast)
            }
            Task::Impute => {
                let ratio = self
                    .missing_ratio
                    .ok_or_else(|| Error::Config("impute runs need a `missing_ratio`".into()))?;
                if !(ratio > 0.0 && ratio < 1.0) {
                    return Err(Error::Config(format!("missing_ratio must lie strictly between 0 and 1, got {ratio}")));
                }
                if self.horizon.is_some_and(|h| h != self.model.lookback) {
                    return Err(Error::Config("imputation reconstructs the window: `horizon` must be omitted or equal the lookback".into()));
                }
                Ok(Objective::Impute { ratio, single_rm_weighting: self.single_rm_weighting })
            }
        }
    }

    pub fn horizon(&self) -> usize {
        match self.task {
            Task::Forecast => self.horizon.unwrap_or(0),
            Task::Impute => self.model.lookback,
        }
    }

    /// Full model config for a dataset with `features` channels.
    pub fn model_config(&self, features: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let convs = match (&m.convs, m.conv_count) {
            (Some(_), Some(_)) => return Err(Error::Config("give either `convs` or `conv_count`, not both".into())),
            (Some(c), None) => c.clone(),
            (None, Some(k)) => auto_conv_specs(m.lookback, k),
            (None, None) => return Err(Error::Config("the model needs `convs` or `conv_count`".into())),
        };
        let cfg = ModelConfig {
            layers: m.layers,
            heads: m.heads,
            dim: m.dim,
            convs,
            attention: m.attention,
            ifc: m.ifc,
            merge_trainable: m.merge_trainable,
            dropout: m.dropout,
            lookback: m.lookback,
            horizon: self.horizon(),
            features,
            force_ranges: m.force_ranges,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with explicit convolutions, as written to run snapshots.
    pub fn resolved(&self, model: &ModelConfig) -> RunConfig {
        let mut r = self.clone();
        r.model.convs = Some(model.convs.clone());
        r.model.conv_count = None;
        r
    }

    /// Short stable digest of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes");
        let digest = Sha256::digest(json.as_bytes());
        format!("{digest:x}")[..12].to_string()
    }

    /// Loads (or generates), splits and standardizes the dataset.
    /// `base` is the directory relative paths fall back to.
    pub fn load_dataset(&self, base: &Path) -> Result<SeriesDataset> {
        let d = &self.data;
        let registry = match &d.registry {
            Some(p) => Registry::load(&resolve(p, d.root.as_deref(), base))?,
            None => Registry::default(),
        };
        let info = registry.lookup(&d.name);
        let ds = if let Some(s) = &d.synthetic {
            let mut ds = data::synthetic_sines(s.rows, s.channels, s.noise, s.seed)?;
            ds.name = d.name.clone();
            ds
        } else {
            let rel = d
                .path
                .clone()
                .or_else(|| info.as_ref().map(|i| i.path.clone()))
                .ok_or_else(|| Error::Config(format!("dataset {} has no path and is not in the registry", d.name)))?;
            let path = resolve(&rel, d.root.as_deref(), base);
            let mut ds = data::load_csv(&path, &d.name)?;
            if let Some(want) = info.as_ref().and_then(|i| i.channels) {
                if ds.channels() != want {
                    return Err(Error::Data(format!("dataset {} should have {want} channels, found {}", d.name, ds.channels())));
                }
            }
            ds.frequency = info.as_ref().and_then(|i| i.frequency.clone());
            ds
        };
        let split = d
            .split
            .clone()
            .or_else(|| info.map(|i| i.split))
            .unwrap_or(SplitSpec::Fractions([0.7, 0.1]));
        data::split_and_standardize(ds, &split, d.standardize)
    }
}

/// Absolute paths pass through; relative ones join `root`, else
/// `$TSRM_DATA_DIR`, else `base`.
pub fn resolve(path: &Path, root: Option<&Path>, base: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    if let Some(r) = root {
        return r.join(path);
    }
    if let Some(env) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(env).join(path);
    }
    base.join(path)
}
