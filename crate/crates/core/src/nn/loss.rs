use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-likelihood of `targets` under `pred`.
///
/// `pred` holds probabilities along axis 1: `(N, K)` for classification or
/// `(N, K, H, W)` for per-pixel prediction. `targets` (and `mask`, if given)
/// list one entry per position in `(n, h, w)` row-major order. Positions with
/// `mask == false` are ignored; if every position is masked out the loss is
/// 0 with a zero gradient.
///
/// Returns the loss and its gradient with respect to `pred`.
pub fn cross_entropy(pred: &Tensor, targets: &[usize], mask: Option<&[bool]>) -> Result<(f64, Tensor)> {
    if pred.rank() < 2 {
        return Err(Error::Shape(format!(
            "cross_entropy: predictions need rank >= 2, got {:?}",
            pred.shape()
        )));
    }
    let n = pred.dim(0);
    let k = pred.dim(1);
    let inner: usize = pred.shape()[2..].iter().product();
    if targets.len() != n * inner {
        return Err(Error::Shape(format!(
            "cross_entropy: {} targets for {} positions",
            targets.len(),
            n * inner
        )));
    }
    if let Some(m) = mask {
        if m.len() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: mask has {} entries for {} positions",
                m.len(),
                targets.len()
            )));
        }
    }
    if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
        return Err(Error::Data(format!(
            "target {t} at position {i} is out of range for {k} classes"
        )));
    }
    let active = |pos: usize| mask.map_or(true, |m| m[pos]);
    let count = (0..targets.len()).filter(|&p| active(p)).count();
    let mut grad = Tensor::zeros(pred.shape());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let pd = pred.data();
    let gd = grad.data_mut();
    let mut loss = 0.0;
    for i in 0..n {
        for p in 0..inner {
            let pos = i * inner + p;
            if !active(pos) {
                continue;
            }
            let idx = (i * k + targets[pos]) * inner + p;
            let prob = pd[idx].max(f64::MIN_POSITIVE);
            loss -= prob.ln();
            gd[idx] = -inv / prob;
        }
    }
    Ok((loss * inv, grad))
}
