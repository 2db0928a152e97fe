//! Active segmentation: a shared encoder feeding E decoder heads, KL
//! coupling on the heads only, and crop-level querying.

mod grid;
mod task;

pub use grid::{make_grid, per_class_iou, CropGrid, CropLabelMask, IouReport, Rect};
pub use task::{pixel_scores, score_crop, write_crop_log, CropAnnotator, SegTask};

use serde::{Deserialize, Serialize};

use crate::acquisition::PredictionSet;
use crate::data::Dataset;
use crate::ensemble::{epoch_batches, epoch_order, mean_of, Decision, Dpe, EarlyStopping, Regularizer, StopReason};
use crate::ensemble::{EpochRecord, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, he_initialize, seg_encoder, seg_head, Mode, Network, SgdState};
use crate::seed;
use crate::tensor::Tensor;

/// Default encoder L2 weight.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// Sizes of the desk-scale segmentation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub classes: usize,
    #[serde(default = "default_widths")]
    pub encoder_widths: [usize; 3],
    #[serde(default = "default_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_widths() -> [usize; 3] {
    [8, 16, 16]
}

fn default_hidden() -> usize {
    16
}

fn default_heads() -> usize {
    crate::ensemble::DEFAULT_ENSEMBLE
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

/// Shared encoder plus an ensemble of decoder heads.
#[derive(Debug, Clone)]
pub struct SegDpe {
    encoder: Network,
    heads: Dpe,
    lambda: f64,
}

/// Per-pixel probabilities `(N, K, H, W)` of every head and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    pub members: Vec<Tensor>,
    pub mean: Tensor,
}

impl SegPrediction {
    /// Head distributions at pixel `(y, x)` of image `n`.
    pub fn pixel_set(&self, n: usize, y: usize, x: usize) -> Result<PredictionSet> {
        let (k, h, w) = (self.mean.dim(1), self.mean.dim(2), self.mean.dim(3));
        let mut flat = Vec::with_capacity(self.members.len() * k);
        for m in &self.members {
            let d = m.data();
            flat.extend((0..k).map(|c| d[((n * k + c) * h + y) * w + x]));
        }
        PredictionSet::from_flat(self.members.len(), k, flat)
    }

    /// Argmax class map of the mean prediction for image `n`.
    pub fn labels(&self, n: usize) -> Vec<u8> {
        let (k, hw) = (self.mean.dim(1), self.mean.dim(2) * self.mean.dim(3));
        let d = &self.mean.data()[n * k * hw..(n + 1) * k * hw];
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * hw + p] > d[best * hw + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Gradients of the full segmentation loss.
#[derive(Debug, Clone)]
pub struct SegGradients {
    pub loss: f64,
    pub encoder: Vec<Tensor>,
    pub heads: Vec<Vec<Tensor>>,
}

fn feature_index(i: usize, full: usize, feat: usize) -> usize {
    (i * feat / full).min(feat - 1)
}

/// Nearest-neighbor upsampling of `(N, K, fh, fw)` to `(N, K, h, w)`.
pub fn upsample_nearest(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, k, fh, fw) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    let src = t.data();
    let mut out = Vec::with_capacity(n * k * h * w);
    for plane in 0..n * k {
        for y in 0..h {
            let row = &src[(plane * fh + feature_index(y, h, fh)) * fw..][..fw];
            out.extend((0..w).map(|x| row[feature_index(x, w, fw)]));
        }
    }
    Tensor::new(vec![n, k, h, w], out).expect("upsample shape")
}

/// Adjoint of [`upsample_nearest`]: sums every block back onto its source.
pub fn downsample_sum(t: &Tensor, fh: usize, fw: usize) -> Tensor {
    let (n, k, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    let mut out = Tensor::zeros(&[n, k, fh, fw]);
    let src = t.data();
    let dst = out.data_mut();
    for plane in 0..n * k {
        for y in 0..h {
            let fy = feature_index(y, h, fh);
            for x in 0..w {
                dst[(plane * fh + fy) * fw + feature_index(x, w, fw)] += src[(plane * h + y) * w + x];
            }
        }
    }
    out
}

impl SegDpe {
    pub fn new(cfg: &SegModelConfig, seed: u64) -> Result<Self> {
        let encoder = he_initialize(
            Network::new(seg_encoder(cfg.in_channels, cfg.encoder_widths))?,
            seed::derive_tagged(seed, "encoder", 0),
        );
        let regularizer = if cfg.heads >= 2 {
            Regularizer::Kl { beta: cfg.beta }
        } else {
            Regularizer::None
        };
        let heads = Dpe::new(
            seg_head(cfg.encoder_widths[2], cfg.head_hidden, cfg.classes),
            cfg.heads,
            regularizer,
            seed::derive_tagged(seed, "heads", 0),
        )?;
        Self::from_parts(encoder, heads, cfg.lambda)
    }

    pub fn from_parts(encoder: Network, heads: Dpe, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("encoder L2 weight must be >= 0, got {lambda}")));
        }
        Ok(SegDpe { encoder, heads, lambda })
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn heads(&self) -> &Dpe {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut Dpe {
        &mut self.heads
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Evaluation-mode forward: the encoder runs once, every head reads the
    /// same features, outputs are upsampled to the input resolution.
    pub fn predict(&self, x: &Tensor) -> Result<SegPrediction> {
        if x.rank() != 4 {
            return Err(Error::Shape(format!("segmentation input must be (N, C, H, W), got {:?}", x.shape())));
        }
        let (h, w) = (x.dim(2), x.dim(3));
        let feats = self.encoder.infer(x)?;
        let members: Vec<Tensor> = self
            .heads
            .members()
            .iter()
            .map(|head| Ok(upsample_nearest(&head.infer(&feats)?, h, w)))
            .collect::<Result<_>>()?;
        let mean = mean_of(&members);
        Ok(SegPrediction { members, mean })
    }

    /// Loss `sum_e maskedCE_e + beta * Omega(heads) + lambda * ||encoder||^2`
    /// and its gradients. Encoder gradients are summed over the heads.
    pub fn gradients(&mut self, x: &Tensor, targets: &[usize], mask: &[bool]) -> Result<SegGradients> {
        let (h, w) = (x.dim(2), x.dim(3));
        let feats = self.encoder.forward(x, Mode::Train)?;
        let (fh, fw) = (feats.dim(2), feats.dim(3));
        let mut feat_grad = Tensor::zeros(feats.shape());
        let mut head_grads = Vec::with_capacity(self.heads.ensemble_size());
        let mut loss = 0.0;
        for head in self.heads.members_mut() {
            let probs = head.forward(&feats, Mode::Train)?;
            let (ce, g_up) = cross_entropy(&upsample_nearest(&probs, h, w), targets, Some(mask))?;
            let g = head.backward(&downsample_sum(&g_up, fh, fw))?;
            feat_grad.axpy(1.0, &g.input)?;
            head_grads.push(g.params);
            loss += ce;
        }
        if let Some(reg) = self.heads.penalty_grad()? {
            loss += self.heads.penalty()?;
            for (grads, r) in head_grads.iter_mut().zip(reg) {
                for (g, r) in grads.iter_mut().zip(&r) {
                    g.axpy(1.0, r)?;
                }
            }
        }
        let mut encoder = self.encoder.backward(&feat_grad)?.params;
        if self.lambda != 0.0 {
            for (g, p) in encoder.iter_mut().zip(self.encoder.params()) {
                g.axpy(2.0 * self.lambda, p)?;
                loss += self.lambda * p.sq_norm();
            }
        }
        Ok(SegGradients {
            loss,
            encoder,
            heads: head_grads,
        })
    }

    /// One SGD step on a batch; returns the loss before the step.
    pub fn train_step(
        &mut self,
        states: &mut SegOptimizer,
        x: &Tensor,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<f64> {
        let g = self.gradients(x, targets, mask)?;
        states.encoder.step(self.encoder.params_mut(), &g.encoder)?;
        for ((head, state), grads) in self.heads.members_mut().iter_mut().zip(&mut states.heads).zip(&g.heads) {
            state.step(head.params_mut(), grads)?;
        }
        Ok(g.loss)
    }
}

/// Momentum buffers for the encoder and every head.
#[derive(Debug, Clone)]
pub struct SegOptimizer {
    pub encoder: SgdState,
    pub heads: Vec<SgdState>,
}

impl SegOptimizer {
    pub fn new(model: &SegDpe, lr: f64, momentum: f64) -> Result<Self> {
        Ok(SegOptimizer {
            encoder: SgdState::for_network(&model.encoder, lr, momentum)?,
            heads: model
                .heads
                .members()
                .iter()
                .map(|h| SgdState::for_network(h, lr, momentum))
                .collect::<Result<_>>()?,
        })
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.encoder.learning_rate = lr;
        self.heads.iter_mut().for_each(|s| s.learning_rate = lr);
    }
}

/// Mean IoU of the ensemble-mean prediction over a mask dataset.
pub fn evaluate(model: &SegDpe, data: &Dataset) -> Result<IouReport> {
    let masks = data.masks()?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for start in (0..data.len()).step_by(16) {
        let rows: Vec<usize> = (start..(start + 16).min(data.len())).collect();
        let p = model.predict(&data.inputs.select_rows(&rows))?;
        for (i, &r) in rows.iter().enumerate() {
            pred.extend(p.labels(i));
            truth.extend_from_slice(&masks[r]);
        }
    }
    Ok(per_class_iou(&pred, &truth, data.classes))
}

/// Train on images whose purchased pixels are marked in `label_masks`,
/// early-stopping on validation mean IoU.
pub fn train_seg(
    model: &mut SegDpe,
    images: &Dataset,
    label_masks: &[Vec<bool>],
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let masks = images.masks()?;
    if label_masks.len() != images.len() {
        return Err(Error::Shape(format!("{} label masks for {} images", label_masks.len(), images.len())));
    }
    let used: Vec<usize> = (0..images.len()).filter(|&i| label_masks[i].iter().any(|&b| b)).collect();
    if used.is_empty() {
        return Err(Error::Config("training needs at least one purchased crop".into()));
    }
    if cfg.early_stopping && val.is_empty() {
        return Err(Error::Config("early stopping needs a nonempty validation set".into()));
    }
    let mut opt = SegOptimizer::new(model, cfg.lr0, cfg.momentum)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<(usize, SegDpe)> = None;
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_accuracy: None,
        stop: StopReason::MaxEpochs,
    };
    let mut lr = cfg.lr0;
    for epoch in 1..=cfg.max_epochs {
        let order: Vec<usize> = epoch_order(used.len(), cfg.seed, epoch).into_iter().map(|i| used[i]).collect();
        let batches = epoch_batches(&order, cfg.batch_size);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let x = images.inputs.select_rows(batch);
            let targets: Vec<usize> = batch.iter().flat_map(|&i| masks[i].iter().map(|&v| v as usize)).collect();
            let mask: Vec<bool> = batch.iter().flat_map(|&i| label_masks[i].iter().copied()).collect();
            loss_sum += model.train_step(&mut opt, &x, &targets, &mask)?;
        }
        let train_loss = loss_sum / batches.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Domain(format!("training loss became {train_loss} at epoch {epoch}")));
        }
        let val_metric = if val.is_empty() { None } else { Some(evaluate(model, val)?.mean) };
        log::debug!("seg epoch {epoch}: lr {lr:.3e} loss {train_loss:.5} val miou {val_metric:?}");
        log.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            val_accuracy: val_metric,
        });
        if !cfg.early_stopping {
            continue;
        }
        match stopper.observe(val_metric.expect("validation set is nonempty")) {
            Decision::Improved => best = Some((epoch, model.clone())),
            Decision::Continue => {}
            Decision::DropLearningRate => {
                lr *= cfg.lr_drop;
                opt.set_learning_rate(lr);
            }
            Decision::Stop => {
                log.stop = StopReason::Plateau;
                break;
            }
        }
    }
    if let Some((epoch, snapshot)) = best {
        *model = snapshot;
        log.best_epoch = Some(epoch);
        log.best_val_accuracy = stopper.best();
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
