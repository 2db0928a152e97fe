//! The ensemble: members, joint regularizer, prediction and persistence.

mod checkpoint;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, Checkpoint, CheckpointGroup, Metadata, MAGIC};
pub use train::{
    epoch_batches, epoch_order, joint_step, train, Decision, EarlyStopping, EpochRecord, StopReason, TrainConfig,
    TrainLog,
};

use serde::{Deserialize, Serialize};

use crate::acquisition::PredictionSet;
use crate::error::{Error, Result};
use crate::kl::{self, ParameterGroup};
use crate::nn::{he_initialize, LayerSpec, Network};
use crate::seed;
use crate::tensor::Tensor;

/// Default ensemble size.
pub const DEFAULT_ENSEMBLE: usize = 8;

/// Coupling term added to the summed member cross-entropies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularizer {
    /// `beta * Omega` over the cross-member statistics.
    Kl { beta: f64 },
    /// `lambda * sum ||theta||^2` applied to every member independently.
    L2 { lambda: f64 },
    None,
}

impl Regularizer {
    fn validate(&self) -> Result<()> {
        let c = match *self {
            Regularizer::Kl { beta } => beta,
            Regularizer::L2 { lambda } => lambda,
            Regularizer::None => 0.0,
        };
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("regularization strength must be finite and >= 0, got {c}")));
        }
        Ok(())
    }

    fn is_active(&self) -> bool {
        match *self {
            Regularizer::Kl { beta } => beta != 0.0,
            Regularizer::L2 { lambda } => lambda != 0.0,
            Regularizer::None => false,
        }
    }
}

/// Seed of member `e` of an ensemble built from `seed`.
pub fn member_seed(seed: u64, e: usize) -> u64 {
    seed::derive_tagged(seed, "member", e as u64)
}

/// Per-member probability tensors and their elementwise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub members: Vec<Tensor>,
    pub mean: Tensor,
}

impl EnsemblePrediction {
    /// Member probability vectors of sample `i` (rows of `(N, K)` outputs).
    pub fn prediction_set(&self, i: usize) -> Result<PredictionSet> {
        let k = self.mean.row_len();
        let mut flat = Vec::with_capacity(self.members.len() * k);
        for m in &self.members {
            flat.extend_from_slice(m.row(i));
        }
        PredictionSet::from_flat(self.members.len(), k, flat)
    }

    /// Accuracy of the ensemble-mean prediction.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        accuracy(&self.mean, labels)
    }
}

/// Fraction of rows whose argmax equals the label; 0 for no rows.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

const PREDICT_CHUNK: usize = 512;

/// A deep probabilistic ensemble of structurally identical networks.
#[derive(Debug, Clone)]
pub struct Dpe {
    members: Vec<Network>,
    regularizer: Regularizer,
}

impl Dpe {
    /// `ensemble` He-initialized members drawn from `seed`.
    pub fn new(layers: Vec<LayerSpec>, ensemble: usize, regularizer: Regularizer, seed: u64) -> Result<Self> {
        let template = Network::new(layers)?;
        let members = (0..ensemble)
            .map(|e| he_initialize(template.clone(), member_seed(seed, e)))
            .collect();
        Self::from_members(members, regularizer)
    }

    pub fn from_members(members: Vec<Network>, regularizer: Regularizer) -> Result<Self> {
        regularizer.validate()?;
        let Some(first) = members.first() else {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        };
        if members.iter().any(|m| m.layers() != first.layers()) {
            return Err(Error::Config("ensemble members must share identical layer specs".into()));
        }
        if !first.outputs_probabilities() {
            return Err(Error::Config("ensemble members must end in a softmax".into()));
        }
        if let Regularizer::Kl { .. } = regularizer {
            if members.len() < 2 {
                return Err(Error::Config("the KL regularizer needs at least 2 members".into()));
            }
            if members.len() == 2 {
                log::warn!("a 2-member ensemble makes the cross-member variance unstable; gradients may explode");
            }
        }
        Ok(Dpe { members, regularizer })
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Network] {
        &mut self.members
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        self.members[0].layers()
    }

    pub fn regularizer(&self) -> Regularizer {
        self.regularizer
    }

    /// One parameter group per trainable tensor, viewed across members.
    pub fn groups(&self) -> Vec<ParameterGroup<'_>> {
        self.members[0]
            .param_infos()
            .iter()
            .enumerate()
            .map(|(i, info)| {
                let members = self.members.iter().map(|m| &m.params()[i]).collect();
                ParameterGroup::new(info.name.clone(), info.role, info.prior, members).expect("members share shapes")
            })
            .collect()
    }

    /// Value of the coupling term, already scaled by its strength.
    pub fn penalty(&self) -> Result<f64> {
        match self.regularizer {
            Regularizer::Kl { beta } => Ok(beta * kl::omega(&self.groups())?),
            Regularizer::L2 { lambda } => Ok(lambda
                * self
                    .members
                    .iter()
                    .flat_map(|m| m.params())
                    .map(Tensor::sq_norm)
                    .sum::<f64>()),
            Regularizer::None => Ok(0.0),
        }
    }

    /// Gradient of [`Dpe::penalty`], indexed `[member][param]`, or `None`
    /// when the regularizer contributes nothing.
    pub fn penalty_grad(&self) -> Result<Option<Vec<Vec<Tensor>>>> {
        if !self.regularizer.is_active() {
            return Ok(None);
        }
        let grads = match self.regularizer {
            Regularizer::Kl { beta } => {
                let by_group = kl::omega_grad(&self.groups())?;
                let mut by_member: Vec<Vec<Tensor>> = vec![Vec::with_capacity(by_group.len()); self.members.len()];
                for group in by_group {
                    for (e, mut g) in group.into_iter().enumerate() {
                        g.scale(beta);
                        by_member[e].push(g);
                    }
                }
                by_member
            }
            Regularizer::L2 { lambda } => self
                .members
                .iter()
                .map(|m| {
                    m.params()
                        .iter()
                        .map(|p| {
                            let mut g = p.clone();
                            g.scale(2.0 * lambda);
                            g
                        })
                        .collect()
                })
                .collect(),
            Regularizer::None => unreachable!(),
        };
        Ok(Some(grads))
    }

    /// Evaluation-mode probabilities of every member and their mean.
    pub fn predict(&self, x: &Tensor) -> Result<EnsemblePrediction> {
        let n = x.dim(0);
        let members: Vec<Tensor> = self
            .members
            .iter()
            .map(|m| {
                if n <= PREDICT_CHUNK {
                    return m.infer(x);
                }
                let parts = (0..n)
                    .step_by(PREDICT_CHUNK)
                    .map(|s| {
                        let rows: Vec<usize> = (s..(s + PREDICT_CHUNK).min(n)).collect();
                        m.infer(&x.select_rows(&rows))
                    })
                    .collect::<Result<Vec<_>>>()?;
                concat_rows(&parts)
            })
            .collect::<Result<_>>()?;
        let mean = mean_of(&members);
        Ok(EnsemblePrediction { members, mean })
    }

    /// Copy all parameters and batchnorm running statistics from `other`.
    pub(crate) fn assign_from(&mut self, other: &Dpe) {
        self.members.clone_from(&other.members);
    }
}

/// Elementwise mean of equally shaped tensors, accumulated as offsets from
/// the first so identical inputs give an exact result.
pub fn mean_of(tensors: &[Tensor]) -> Tensor {
    let first = &tensors[0];
    let inv = 1.0 / tensors.len() as f64;
    let mut mean = first.clone();
    for (i, m) in mean.data_mut().iter_mut().enumerate() {
        let base = first.data()[i];
        let offset: f64 = tensors[1..].iter().map(|t| t.data()[i] - base).sum();
        *m = base + offset * inv;
    }
    mean
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data)
}
