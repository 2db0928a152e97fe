use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation. Rank-2 inputs `(N, D)` treat
/// every feature as a channel; higher ranks use axis 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let inner = shape[2..].iter().product();
    (n, c, inner)
}

impl ChannelStats {
    pub fn compute(inputs: &Tensor) -> Result<Self> {
        if inputs.rank() < 2 || inputs.dim(0) == 0 {
            return Err(Error::Data("cannot compute channel statistics of an empty input".into()));
        }
        let (n, c, inner) = channel_layout(inputs.shape());
        let count = (n * inner) as f64;
        let x = inputs.data();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let values = (0..n).flat_map(|i| {
                let base = (i * c + ch) * inner;
                x[base..base + inner].iter()
            });
            let m = values.clone().sum::<f64>() / count;
            let v = values.map(|&v| (v - m) * (v - m)).sum::<f64>() / count;
            if !(v > 0.0) {
                return Err(Error::Data(format!("channel {ch} has zero standard deviation")));
            }
            mean[ch] = m;
            std[ch] = v.sqrt();
        }
        Ok(ChannelStats { mean, std })
    }

    /// `(x - mean) / std` per channel.
    pub fn apply(&self, inputs: &Tensor) -> Tensor {
        let mut out = inputs.clone();
        if out.is_empty() {
            return out;
        }
        let (n, c, inner) = channel_layout(inputs.shape());
        assert_eq!(c, self.mean.len(), "channel count mismatch");
        let d = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                let (m, s) = (self.mean[ch], self.std[ch]);
                for v in &mut d[base..base + inner] {
                    *v = (*v - m) / s;
                }
            }
        }
        out
    }
}

/// Random reflection-pad, crop and horizontal flip for image batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Reflection padding on every side.
    pub pad: usize,
    /// Output `(width, height)`; the input size when absent.
    #[serde(default)]
    pub crop: Option<(usize, usize)>,
    /// Probability of a horizontal flip.
    #[serde(default)]
    pub hflip_prob: f64,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Augment `(N, C, H, W)` inputs; masks, when given, get the same geometric
/// transform per image. Rank-2 inputs pass through unchanged.
pub fn augment(
    inputs: &Tensor,
    masks: Option<&[Vec<u8>]>,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<(Tensor, Option<Vec<Vec<u8>>>)> {
    if inputs.rank() == 2 {
        return Ok((inputs.clone(), masks.map(<[_]>::to_vec)));
    }
    if inputs.rank() != 4 {
        return Err(Error::Shape(format!("augment needs (N, C, H, W), got {:?}", inputs.shape())));
    }
    let (n, c, h, w) = (inputs.dim(0), inputs.dim(1), inputs.dim(2), inputs.dim(3));
    if policy.pad >= h.min(w) {
        return Err(Error::Config(format!("padding {} must be smaller than {h}x{w}", policy.pad)));
    }
    if !(0.0..=1.0).contains(&policy.hflip_prob) {
        return Err(Error::Config("hflip_prob must lie in [0, 1]".into()));
    }
    let (cw, ch) = policy.crop.unwrap_or((w, h));
    let (pw, ph) = (w + 2 * policy.pad, h + 2 * policy.pad);
    if cw == 0 || ch == 0 || cw > pw || ch > ph {
        return Err(Error::Config(format!("crop {cw}x{ch} does not fit padded {pw}x{ph}")));
    }
    if let Some(m) = masks {
        if m.len() != n || m.iter().any(|m| m.len() != h * w) {
            return Err(Error::Shape("masks do not match the input batch".into()));
        }
    }
    let mut rng = seed::rng(seed);
    let x = inputs.data();
    let mut out = Vec::with_capacity(n * c * ch * cw);
    let mut out_masks = masks.map(|_| Vec::with_capacity(n));
    let pad = policy.pad as isize;
    for i in 0..n {
        let ox = rng.gen_range(0..=pw - cw) as isize;
        let oy = rng.gen_range(0..=ph - ch) as isize;
        let flip = rng.gen_bool(policy.hflip_prob);
        let src = |yy: usize, xx: usize| {
            let xx = if flip { cw - 1 - xx } else { xx };
            let sy = reflect(oy + yy as isize - pad, h);
            let sx = reflect(ox + xx as isize - pad, w);
            sy * w + sx
        };
        for chan in 0..c {
            let plane = &x[(i * c + chan) * h * w..][..h * w];
            for yy in 0..ch {
                out.extend((0..cw).map(|xx| plane[src(yy, xx)]));
            }
        }
        if let (Some(m), Some(om)) = (masks, out_masks.as_mut()) {
            om.push((0..ch).flat_map(|yy| (0..cw).map(move |xx| (yy, xx))).map(|(yy, xx)| m[i][src(yy, xx)]).collect());
        }
    }
    Ok((Tensor::new(vec![n, c, ch, cw], out)?, out_masks))
}
