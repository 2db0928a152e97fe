use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

use super::{Dataset, Labels};

/// Gaussian mixture classification data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub samples: usize,
    pub dim: usize,
    /// Gaussian components per class.
    #[serde(default = "one")]
    pub modes_per_class: usize,
    /// Standard deviation of component centers around the origin.
    #[serde(default = "one_f")]
    pub separation: f64,
    /// Standard deviation of samples around their component center.
    #[serde(default = "half")]
    pub spread: f64,
    /// Relative class frequencies; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

impl BlobSpec {
    pub fn new(classes: usize, samples: usize, dim: usize) -> Self {
        BlobSpec {
            classes,
            samples,
            dim,
            modes_per_class: 1,
            separation: 1.0,
            spread: 0.5,
            weights: None,
        }
    }

    /// Per-class sample counts: largest-remainder rounding of the weights.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let w = match &self.weights {
            Some(w) => {
                if w.len() != self.classes {
                    return Err(Error::Config(format!(
                        "{} class weights for {} classes",
                        w.len(),
                        self.classes
                    )));
                }
                if w.iter().any(|&v| !(v.is_finite() && v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::Config("class weights must be nonnegative with a positive sum".into()));
                }
                w.clone()
            }
            None => vec![1.0; self.classes],
        };
        let total: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|v| v / total * self.samples as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
        let mut order: Vec<usize> = (0..self.classes).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let short = self.samples - counts.iter().sum::<usize>();
        for &c in order.iter().take(short) {
            counts[c] += 1;
        }
        Ok(counts)
    }
}

/// Sample a Gaussian mixture dataset with inputs of shape `(N, dim)`.
pub fn synth_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    if spec.classes == 0 || spec.dim == 0 || spec.modes_per_class == 0 {
        return Err(Error::Config("blob classes, dim and modes_per_class must be >= 1".into()));
    }
    if !(spec.separation > 0.0 && spec.spread > 0.0) {
        return Err(Error::Config("blob separation and spread must be positive".into()));
    }
    let counts = spec.class_counts()?;
    let mut rng = seed::rng(seed);
    let center_dist = Normal::new(0.0, spec.separation).expect("positive std");
    let centers: Vec<Vec<f64>> = (0..spec.classes * spec.modes_per_class)
        .map(|_| (0..spec.dim).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
        .collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.spread).expect("positive std");
    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    for &c in &labels {
        let mode = rng.gen_range(0..spec.modes_per_class);
        let center = &centers[c * spec.modes_per_class + mode];
        data.extend(center.iter().map(|&m| m + noise.sample(&mut rng)));
    }
    Dataset::new(
        Tensor::new(vec![spec.samples, spec.dim], data)?,
        Labels::Classes(labels),
        spec.classes,
    )
}

/// Toy segmentation scenes: colored rectangles on a background, with the
/// last class drawn as small, infrequent squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesSpec {
    pub images: usize,
    pub width: usize,
    pub height: usize,
    /// Background plus object classes; the last class is the rare one.
    pub classes: usize,
    /// Probability that an image contains a rare-class square.
    #[serde(default = "rare_prob")]
    pub rare_prob: f64,
    /// Pixel noise standard deviation.
    #[serde(default = "noise")]
    pub noise: f64,
    /// Inclusive side-length range of rare-class squares.
    #[serde(default = "rare_size")]
    pub rare_size: (usize, usize),
}

impl Default for ShapesSpec {
    fn default() -> Self {
        ShapesSpec {
            images: 100,
            width: 64,
            height: 48,
            classes: 4,
            rare_prob: rare_prob(),
            noise: noise(),
            rare_size: rare_size(),
        }
    }
}

fn rare_size() -> (usize, usize) {
    (6, 10)
}

fn rare_prob() -> f64 {
    0.5
}

fn noise() -> f64 {
    0.1
}

const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.80, 0.25, 0.20],
    [0.25, 0.70, 0.30],
    [0.25, 0.30, 0.80],
    [0.85, 0.45, 0.25],
    [0.80, 0.80, 0.25],
    [0.30, 0.75, 0.75],
    [0.75, 0.30, 0.75],
];

fn fill(mask: &mut [u8], width: usize, (x0, y0, w, h): (usize, usize, usize, usize), class: u8) {
    for y in y0..y0 + h {
        mask[y * width + x0..y * width + x0 + w].fill(class);
    }
}

/// Render a segmentation dataset with inputs `(N, 3, H, W)` in `[0, 1]`.
pub fn synth_shapes_seg(spec: &ShapesSpec, seed: u64) -> Result<Dataset> {
    if !(2..=PALETTE.len()).contains(&spec.classes) {
        return Err(Error::Config(format!("shapes need 2..={} classes", PALETTE.len())));
    }
    if spec.width < 16 || spec.height < 16 {
        return Err(Error::Config("shapes images must be at least 16x16".into()));
    }
    let (lo, hi) = spec.rare_size;
    if lo == 0 || lo > hi || hi > spec.width.min(spec.height) {
        return Err(Error::Config(format!("rare_size {lo}..={hi} does not fit the image")));
    }
    if !(0.0..=1.0).contains(&spec.rare_prob) || !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config("rare_prob must lie in [0, 1] and noise must be >= 0".into()));
    }
    let (w, h) = (spec.width, spec.height);
    let rare = spec.classes - 1;
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("positive std");
    let mut data = Vec::with_capacity(spec.images * 3 * w * h);
    let mut masks = Vec::with_capacity(spec.images);
    for _ in 0..spec.images {
        let mut mask = vec![0u8; w * h];
        for class in 1..rare {
            for _ in 0..rng.gen_range(1..=2) {
                let rw = rng.gen_range(w / 8..=w / 3);
                let rh = rng.gen_range(h / 8..=h / 3);
                let x0 = rng.gen_range(0..=w - rw);
                let y0 = rng.gen_range(0..=h - rh);
                fill(&mut mask, w, (x0, y0, rw, rh), class as u8);
            }
        }
        if rare > 0 && rng.gen_bool(spec.rare_prob) {
            let s = rng.gen_range(lo..=hi);
            let x0 = rng.gen_range(0..=w - s);
            let y0 = rng.gen_range(0..=h - s);
            fill(&mut mask, w, (x0, y0, s, s), rare as u8);
        }
        let jitter: f64 = rng.gen_range(-0.1..0.1);
        let start = data.len();
        data.resize(start + 3 * w * h, 0.0);
        for (p, &class) in mask.iter().enumerate() {
            for c in 0..3 {
                let v = PALETTE[class as usize][c] + jitter + noise.sample(&mut rng);
                data[start + c * w * h + p] = v.clamp(0.0, 1.0);
            }
        }
        masks.push(mask);
    }
    Dataset::new(
        Tensor::new(vec![spec.images, 3, h, w], data)?,
        Labels::Masks(masks),
        spec.classes,
    )
}
