use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::Acquisition;
use crate::active::{schedule_batches, GrowthSchedule};
use crate::data::{BlobSpec, ShapesSpec};
use crate::ensemble::{Regularizer, TrainConfig, DEFAULT_ENSEMBLE};
use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::seg::SegModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classify,
    Segment,
}

/// Where the pool comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Blobs(BlobSpec),
    Shapes(ShapesSpec),
    Idx { images: PathBuf, labels: PathBuf, classes: usize },
    Cifar { files: Vec<PathBuf> },
    SegPairs { dir: PathBuf, classes: usize },
}

impl DataSpec {
    fn is_synthetic(&self) -> bool {
        matches!(self, DataSpec::Blobs(_) | DataSpec::Shapes(_))
    }

    fn paths(&self) -> Vec<&PathBuf> {
        match self {
            DataSpec::Idx { images, labels, .. } => vec![images, labels],
            DataSpec::Cifar { files } => files.iter().collect(),
            DataSpec::SegPairs { dir, .. } => vec![dir],
            _ => Vec::new(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DataSpec::Blobs(b) => b.classes,
            DataSpec::Shapes(s) => s.classes,
            DataSpec::Idx { classes, .. } | DataSpec::SegPairs { classes, .. } => *classes,
            DataSpec::Cifar { .. } => 10,
        }
    }

    fn segmentation(&self) -> bool {
        matches!(self, DataSpec::Shapes(_) | DataSpec::SegPairs { .. })
    }
}

/// Classification model: architecture, ensemble size, coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    pub regularizer: Regularizer,
}

fn default_ensemble() -> usize {
    DEFAULT_ENSEMBLE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub cols: usize,
    pub rows: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { cols: 4, rows: 3 }
    }
}

fn default_holdout() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

/// A complete experiment description, loaded from strict JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub data: DataSpec,
    /// Separate validation data; otherwise `holdout` of the pool is held out.
    #[serde(default)]
    pub val_data: Option<DataSpec>,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    /// Seed of synthetic data; when absent every experiment seed draws its
    /// own data.
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub seg_model: Option<SegModelConfig>,
    #[serde(default)]
    pub grid: GridSpec,
    pub schedule: GrowthSchedule,
    pub acquisition: String,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Also train on the whole pool and record the upper-bound metric.
    #[serde(default)]
    pub full_supervision: bool,
    #[serde(default)]
    pub clamp_to_pool: bool,
    /// Record wall-clock seconds; when off, timings are written as 0 so
    /// re-runs produce identical bytes.
    #[serde(default = "yes")]
    pub record_timings: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds: at least one seed is required".to_owned());
        }
        for spec in std::iter::once(&self.data).chain(&self.val_data) {
            for p in spec.paths() {
                if !p.exists() {
                    errs.push(format!("data: {} does not exist", p.display()));
                }
            }
            if spec.segmentation() != (self.task == TaskKind::Segment) {
                errs.push(format!("data: {:?} data does not fit the {:?} task", spec, self.task));
            }
        }
        if self.val_data.is_none() && !(self.holdout > 0.0 && self.holdout < 1.0) {
            errs.push(format!("holdout: must lie in (0, 1) without val_data, got {}", self.holdout));
        }
        if self.data_seed.is_some() && !self.data.is_synthetic() {
            errs.push("data_seed: only synthetic data takes a seed".into());
        }
        let classes = self.data.classes();
        match self.task {
            TaskKind::Classify => match &self.model {
                None => errs.push("model: required for classification".into()),
                Some(m) => {
                    if m.arch.classes() != classes {
                        errs.push(format!("model.arch: {} classes, data has {classes}", m.arch.classes()));
                    }
                    if m.ensemble == 0 {
                        errs.push("model.ensemble: must be >= 1".into());
                    }
                    if matches!(m.regularizer, Regularizer::Kl { .. }) && m.ensemble < 2 {
                        errs.push("model.ensemble: the KL regularizer needs >= 2 members".into());
                    }
                }
            },
            TaskKind::Segment => match &self.seg_model {
                None => errs.push("seg_model: required for segmentation".into()),
                Some(m) => {
                    if m.classes != classes {
                        errs.push(format!("seg_model.classes: {}, data has {classes}", m.classes));
                    }
                    if m.heads == 0 {
                        errs.push("seg_model.heads: must be >= 1".into());
                    }
                }
            },
        }
        if self.grid.cols == 0 || self.grid.rows == 0 {
            errs.push("grid: cols and rows must be >= 1".into());
        }
        if let Err(e) = schedule_batches(&self.schedule) {
            errs.push(format!("schedule: {e}"));
        }
        if let Err(e) = self.acquisition() {
            errs.push(format!("acquisition: {e}"));
        } else if let Some(w) = &self.class_weights {
            if w.len() != classes {
                errs.push(format!("class_weights: {} weights for {classes} classes", w.len()));
            }
        }
        match self.train.validate() {
            Err(Error::Validation(v)) => errs.extend(v.into_iter().map(|e| format!("train: {e}"))),
            Err(e) => errs.push(format!("train: {e}")),
            Ok(()) => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn acquisition(&self) -> Result<Acquisition> {
        Acquisition::from_name(&self.acquisition, self.class_weights.as_deref())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
