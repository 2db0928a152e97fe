//! Datasets: file loaders, synthetic generators, normalization, augmentation.

mod cifar;
mod idx;
pub mod pnm;
mod synth;
mod transform;

pub use cifar::{load_cifar_binary, CIFAR_RECORD_BYTES};
pub use idx::{load_idx, write_idx};
pub use pnm::load_seg_pairs;
pub use synth::{synth_blobs, synth_shapes_seg, BlobSpec, ShapesSpec};
pub use transform::{augment, AugmentPolicy, ChannelStats};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Ground truth attached to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One class index per sample.
    Classes(Vec<usize>),
    /// One `H x W` class-index mask per image.
    Masks(Vec<Vec<u8>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Masks(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, rows: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(rows.iter().map(|&i| c[i]).collect()),
            Labels::Masks(m) => Labels::Masks(rows.iter().map(|&i| m[i].clone()).collect()),
        }
    }
}

/// Inputs stacked along a leading sample axis, with labels and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Labels,
    pub classes: usize,
    /// Statistics the inputs were normalized with, if any.
    pub channel_stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Labels, classes: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::Shape(format!(
                "dataset inputs need a sample axis plus features, got {:?}",
                inputs.shape()
            )));
        }
        if inputs.dim(0) != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.dim(0),
                labels.len()
            )));
        }
        if classes == 0 {
            return Err(Error::Data("dataset needs at least one class".into()));
        }
        match &labels {
            Labels::Classes(c) => {
                if let Some((i, &l)) = c.iter().enumerate().find(|(_, &l)| l >= classes) {
                    return Err(Error::Data(format!("sample {i}: label {l} >= {classes} classes")));
                }
            }
            Labels::Masks(masks) => {
                if inputs.rank() != 4 {
                    return Err(Error::Shape(format!(
                        "mask labels need (N, C, H, W) inputs, got {:?}",
                        inputs.shape()
                    )));
                }
                let hw = inputs.dim(2) * inputs.dim(3);
                for (i, m) in masks.iter().enumerate() {
                    if m.len() != hw {
                        return Err(Error::Data(format!("mask {i} has {} pixels, expected {hw}", m.len())));
                    }
                    if let Some(&v) = m.iter().find(|&&v| v as usize >= classes) {
                        return Err(Error::Data(format!("mask {i}: value {v} >= {classes} classes")));
                    }
                }
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            channel_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn class_labels(&self) -> Result<&[usize]> {
        match &self.labels {
            Labels::Classes(c) => Ok(c),
            Labels::Masks(_) => Err(Error::Data("dataset carries masks, not class labels".into())),
        }
    }

    pub fn masks(&self) -> Result<&[Vec<u8>]> {
        match &self.labels {
            Labels::Masks(m) => Ok(m),
            Labels::Classes(_) => Err(Error::Data("dataset carries class labels, not masks".into())),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows),
            labels: self.labels.subset(rows),
            classes: self.classes,
            channel_stats: self.channel_stats.clone(),
        }
    }

    /// Random split into `(rest, held_out)` with `round(fraction * n)`
    /// samples held out. Both parts keep their original relative order.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("holdout fraction must lie in [0, 1), got {fraction}")));
        }
        let n = self.len();
        let held = (fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed));
        let mut val: Vec<usize> = order[..held].to_vec();
        let mut rest: Vec<usize> = order[held..].to_vec();
        val.sort_unstable();
        rest.sort_unstable();
        Ok((self.subset(&rest), self.subset(&val)))
    }

    /// Normalize with statistics computed on this dataset.
    pub fn normalize(&self) -> Result<Dataset> {
        let stats = ChannelStats::compute(&self.inputs)?;
        Ok(self.normalize_with(&stats))
    }

    /// Normalize with externally supplied statistics.
    pub fn normalize_with(&self, stats: &ChannelStats) -> Dataset {
        Dataset {
            inputs: stats.apply(&self.inputs),
            labels: self.labels.clone(),
            classes: self.classes,
            channel_stats: Some(stats.clone()),
        }
    }
}

/// Standalone form of [`Dataset::normalize`].
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    ds.normalize()
}
