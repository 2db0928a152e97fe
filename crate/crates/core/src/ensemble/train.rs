use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Mode, Network, SgdState};
use crate::seed;
use crate::tensor::Tensor;

use super::Dpe;

/// Optimizer and schedule settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr_drop: f64,
    pub seed: u64,
    /// Plateau schedule and best-checkpoint restore; when off, every run
    /// lasts `max_epochs` and ends with the final parameters.
    #[serde(default = "yes")]
    pub early_stopping: bool,
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
    /// Worker threads for member passes; 0 or 1 runs single-threaded.
    #[serde(default)]
    pub threads: usize,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            batch_size: 32,
            patience: 25,
            max_epochs: 400,
            lr_drop: 0.1,
            seed: 0,
            early_stopping: true,
            augment: None,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            errs.push(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            errs.push("patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            errs.push("max_epochs must be >= 1".into());
        }
        if !(self.lr_drop > 0.0 && self.lr_drop < 1.0) {
            errs.push(format!("lr_drop must lie in (0, 1), got {}", self.lr_drop));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Outcome of feeding one validation score to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    DropLearningRate,
    Stop,
}

/// Plateau schedule: after `patience` epochs without a strict improvement
/// the learning rate drops once; after `2 * patience` more, training stops.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    since_improvement: usize,
    dropped: bool,
    best: Option<f64>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            since_improvement: 0,
            dropped: false,
            best: None,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, score: f64) -> Decision {
        if self.best.map_or(true, |b| score > b) {
            self.best = Some(score);
            self.since_improvement = 0;
            return Decision::Improved;
        }
        self.since_improvement += 1;
        if !self.dropped && self.since_improvement >= self.patience {
            self.dropped = true;
            self.since_improvement = 0;
            Decision::DropLearningRate
        } else if self.dropped && self.since_improvement >= 2 * self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

/// Sample order of `epoch` (1-based), shared by all members.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive_tagged(seed, "epoch", epoch as u64)));
    order
}

/// Split an epoch order into minibatches. A trailing batch of one sample
/// joins the previous batch so batchnorm never sees a singleton batch.
pub fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    if batches.len() > 1 && batches.last().map(|b| b.len()) == Some(1) {
        batches.pop();
        let start = (batches.len() - 1) * batch_size;
        *batches.last_mut().expect("at least one batch") = &order[start..];
    }
    batches
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over minibatches of the summed member cross-entropies plus the
    /// scaled regularizer.
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub stop: StopReason,
}

impl TrainLog {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }
}

/// Loss of one joint step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub member_ce: Vec<f64>,
    pub penalty: f64,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.member_ce.iter().sum::<f64>() + self.penalty
    }
}

fn member_pass(net: &mut Network, x: &Tensor, y: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let out = net.forward(x, Mode::Train)?;
    let (loss, grad) = cross_entropy(&out, y, None)?;
    Ok((loss, net.backward(&grad)?.params))
}

/// One minibatch update: every member backpropagates its own cross-entropy,
/// the regularizer gradient is evaluated once on the pre-step parameters,
/// then each member takes an SGD step on the sum.
pub fn joint_step(
    dpe: &mut Dpe,
    states: &mut [SgdState],
    x: &Tensor,
    y: &[usize],
    pool: Option<&rayon::ThreadPool>,
) -> Result<StepLoss> {
    let passes: Vec<(f64, Vec<Tensor>)> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            dpe.members
                .par_iter_mut()
                .map(|m| member_pass(m, x, y))
                .collect::<Result<Vec<_>>>()
        })?,
        None => dpe
            .members
            .iter_mut()
            .map(|m| member_pass(m, x, y))
            .collect::<Result<Vec<_>>>()?,
    };
    let penalty = if dpe.regularizer.is_active() { dpe.penalty()? } else { 0.0 };
    let reg = dpe.penalty_grad()?;
    let mut member_ce = Vec::with_capacity(passes.len());
    for (e, (loss, mut grads)) in passes.into_iter().enumerate() {
        if let Some(reg) = &reg {
            for (g, r) in grads.iter_mut().zip(&reg[e]) {
                g.axpy(1.0, r)?;
            }
        }
        states[e].step(dpe.members[e].params_mut(), &grads)?;
        member_ce.push(loss);
    }
    Ok(StepLoss { member_ce, penalty })
}

/// Train all members jointly on `labeled`, validating the ensemble-mean
/// accuracy on `val` after every epoch.
pub fn train(dpe: &mut Dpe, labeled: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("training needs a nonempty labeled set".into()));
    }
    if cfg.early_stopping && val.is_empty() {
        return Err(Error::Config("early stopping needs a nonempty validation set".into()));
    }
    let labels = labeled.class_labels()?;
    let val_labels = val.class_labels()?;
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads.min(dpe.ensemble_size()))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut states: Vec<SgdState> = dpe
        .members
        .iter()
        .map(|m| SgdState::for_network(m, cfg.lr0, cfg.momentum))
        .collect::<Result<_>>()?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<(usize, Dpe)> = None;
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_accuracy: None,
        stop: StopReason::MaxEpochs,
    };
    let mut lr = cfg.lr0;
    for epoch in 1..=cfg.max_epochs {
        let inputs = match &cfg.augment {
            Some(policy) => {
                augment(&labeled.inputs, None, policy, seed::derive_tagged(cfg.seed, "augment", epoch as u64))?.0
            }
            None => labeled.inputs.clone(),
        };
        let order = epoch_order(labeled.len(), cfg.seed, epoch);
        let batches = epoch_batches(&order, cfg.batch_size);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let x = inputs.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            loss_sum += joint_step(dpe, &mut states, &x, &y, pool.as_ref())?.total();
        }
        let train_loss = loss_sum / batches.len() as f64;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(dpe.predict(&val.inputs)?.accuracy(val_labels))
        };
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {train_loss:.5} val {val_accuracy:?}");
        log.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            val_accuracy,
        });
        if !train_loss.is_finite() {
            return Err(Error::Domain(format!("training loss became {train_loss} at epoch {epoch}")));
        }
        if !cfg.early_stopping {
            continue;
        }
        match stopper.observe(val_accuracy.expect("validation set is nonempty")) {
            Decision::Improved => best = Some((epoch, dpe.clone())),
            Decision::Continue => {}
            Decision::DropLearningRate => {
                lr *= cfg.lr_drop;
                states.iter_mut().for_each(|s| s.learning_rate = lr);
            }
            Decision::Stop => {
                log.stop = StopReason::Plateau;
                break;
            }
        }
    }
    if let Some((epoch, snapshot)) = best {
        dpe.assign_from(&snapshot);
        log.best_epoch = Some(epoch);
        log.best_val_accuracy = stopper.best();
    }
    Ok(log)
}
