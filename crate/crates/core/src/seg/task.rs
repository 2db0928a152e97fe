use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::acquisition::{random_score, Acquisition};
use crate::active::{ActiveTask, Annotator, QueryRecord, RoundFit};
use crate::data::{Dataset, Labels};
use crate::ensemble::TrainConfig;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

use super::{evaluate, train_seg, CropGrid, IouReport, Rect, SegDpe, SegModelConfig, SegPrediction};

const SCORE_CHUNK: usize = 16;

fn prediction_pixel_scores(pred: &SegPrediction, n: usize, acq: &Acquisition, seed: u64) -> Result<Vec<f64>> {
    let (h, w) = (pred.mean.dim(2), pred.mean.dim(3));
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(acq.score(y * w + x, &pred.pixel_set(n, y, x)?, seed));
        }
    }
    Ok(out)
}

/// Per-pixel acquisition scores of one `(1, C, H, W)` image, row-major.
pub fn pixel_scores(model: &SegDpe, image: &Tensor, acq: &Acquisition, seed: u64) -> Result<Vec<f64>> {
    if image.rank() != 4 || image.dim(0) != 1 {
        return Err(Error::Shape(format!("expected one (1, C, H, W) image, got {:?}", image.shape())));
    }
    prediction_pixel_scores(&model.predict(image)?, 0, acq, seed)
}

/// Sum of the per-pixel scores inside `rect`.
pub fn score_crop(model: &SegDpe, image: &Tensor, rect: &Rect, acq: &Acquisition, seed: u64) -> Result<f64> {
    let (h, w) = (image.dim(2), image.dim(3));
    if !rect.fits(w, h) {
        return Err(Error::Bounds(format!("{rect:?} lies outside a {w}x{h} image")));
    }
    let scores = pixel_scores(model, image, acq, seed)?;
    Ok(rect.pixels(w).map(|p| scores[p]).sum())
}

/// Reveals the ground-truth pixels of one crop, row-major within the crop.
#[derive(Debug, Clone)]
pub struct CropAnnotator {
    masks: Vec<Vec<u8>>,
    grid: CropGrid,
}

impl CropAnnotator {
    pub fn new(masks: Vec<Vec<u8>>, grid: CropGrid) -> Self {
        CropAnnotator { masks, grid }
    }
}

impl Annotator for CropAnnotator {
    type Label = Vec<u8>;

    fn label(&self, unit_id: usize) -> Result<Vec<u8>> {
        let (image, crop) = self.grid.locate(unit_id);
        let mask = self
            .masks
            .get(image)
            .ok_or_else(|| Error::Bounds(format!("unit {unit_id} refers to missing image {image}")))?;
        Ok(self.grid.rects[crop].pixels(self.grid.width).map(|p| mask[p]).collect())
    }
}

/// Crop-level active segmentation over a pool of images. Unit id of crop
/// `i` of image `n` is `n * crops + i`.
#[derive(Debug, Clone)]
pub struct SegTask {
    inputs: Tensor,
    classes: usize,
    pub val: Dataset,
    pub grid: CropGrid,
    pub model_cfg: SegModelConfig,
    pub train: TrainConfig,
    model: Option<SegDpe>,
    last_iou: Option<IouReport>,
}

impl SegTask {
    /// Split a labeled image pool into the task (inputs only) and the
    /// annotator holding its masks.
    pub fn new(
        pool: &Dataset,
        val: Dataset,
        grid: CropGrid,
        model_cfg: SegModelConfig,
        train: TrainConfig,
    ) -> Result<(Self, CropAnnotator)> {
        let masks = pool.masks()?.to_vec();
        if (pool.inputs.dim(3), pool.inputs.dim(2)) != (grid.width, grid.height) {
            return Err(Error::Shape(format!(
                "grid is {}x{}, images are {}x{}",
                grid.width,
                grid.height,
                pool.inputs.dim(3),
                pool.inputs.dim(2)
            )));
        }
        let task = SegTask {
            inputs: pool.inputs.clone(),
            classes: pool.classes,
            val,
            grid: grid.clone(),
            model_cfg,
            train,
            model: None,
            last_iou: None,
        };
        Ok((task, CropAnnotator::new(masks, grid)))
    }

    pub fn units(&self) -> std::ops::Range<usize> {
        0..self.inputs.dim(0) * self.grid.crops()
    }

    pub fn model(&self) -> Option<&SegDpe> {
        self.model.as_ref()
    }

    /// Validation IoU of the model trained in the last round.
    pub fn last_iou(&self) -> Option<&IouReport> {
        self.last_iou.as_ref()
    }
}

impl ActiveTask for SegTask {
    type Label = Vec<u8>;

    fn fit(&mut self, labeled: &BTreeMap<usize, Vec<u8>>, seed: u64) -> Result<RoundFit> {
        let (n, w, h) = (self.inputs.dim(0), self.grid.width, self.grid.height);
        let mut targets = vec![vec![0u8; w * h]; n];
        let mut purchased = vec![vec![false; w * h]; n];
        for (&unit, pixels) in labeled {
            let (image, crop) = self.grid.locate(unit);
            for (p, &v) in self.grid.rects[crop].pixels(w).zip(pixels) {
                targets[image][p] = v;
                purchased[image][p] = true;
            }
        }
        let images = Dataset::new(self.inputs.clone(), Labels::Masks(targets), self.classes)?;
        let mut model = SegDpe::new(&self.model_cfg, seed)?;
        let cfg = TrainConfig {
            seed: seed::derive(seed, 1),
            ..self.train.clone()
        };
        let log = train_seg(&mut model, &images, &purchased, &self.val, &cfg)?;
        let iou = evaluate(&model, &self.val)?;
        let fit = RoundFit {
            val_metric: iou.mean,
            train_epochs: log.epochs_run(),
        };
        self.model = Some(model);
        self.last_iou = Some(iou);
        Ok(fit)
    }

    fn score(&mut self, unlabeled: &[usize], acquisition: &Acquisition, seed: u64) -> Result<Vec<f64>> {
        if !acquisition.needs_predictions() {
            return Ok(unlabeled.iter().map(|&id| random_score(id, seed)).collect());
        }
        let model = self.model.as_ref().ok_or_else(|| Error::Usage("score called before fit".into()))?;
        let images: BTreeSet<usize> = unlabeled.iter().map(|&u| self.grid.locate(u).0).collect();
        let images: Vec<usize> = images.into_iter().collect();
        let mut crop_scores: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for chunk in images.chunks(SCORE_CHUNK) {
            let pred = model.predict(&self.inputs.select_rows(chunk))?;
            for (i, &image) in chunk.iter().enumerate() {
                let px = prediction_pixel_scores(&pred, i, acquisition, seed)?;
                let sums = self
                    .grid
                    .rects
                    .iter()
                    .map(|r| r.pixels(self.grid.width).map(|p| px[p]).sum())
                    .collect();
                crop_scores.insert(image, sums);
            }
        }
        Ok(unlabeled
            .iter()
            .map(|&u| {
                let (image, crop) = self.grid.locate(u);
                crop_scores[&image][crop]
            })
            .collect())
    }
}

/// CSV with header `round,image_id,crop_col,crop_row,score`.
pub fn write_crop_log(log: &[QueryRecord], grid: &CropGrid, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "round,image_id,crop_col,crop_row,score").map_err(io)?;
    for q in log {
        let (image, crop) = grid.locate(q.unit_id);
        let (col, row) = grid.position(crop);
        writeln!(w, "{},{image},{col},{row},{}", q.round, q.score).map_err(io)?;
    }
    w.flush().map_err(io)
}
