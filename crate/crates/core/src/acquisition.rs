//! Acquisition functions over ensemble predictions.
//!
//! Entropy-family scores are computed on the member-mean distribution
//! `m = (1/E) sum_e p_e`. The un-normalized sum forms differ from these by an
//! increasing affine map for fixed `E` (`H(sum) = E H(m) - E ln E`), so rankings
//! are identical. All logarithms are natural.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::argmax;

const PROB_TOL: f64 = 1e-6;

/// `E` probability vectors over `K` classes for one unit (sample or pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    members: usize,
    classes: usize,
    /// `E x K`, row-major.
    probs: Vec<f64>,
}

impl PredictionSet {
    pub fn new(members: &[&[f64]]) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Data("prediction set needs at least one member".into()));
        };
        let k = first.len();
        let mut probs = Vec::with_capacity(members.len() * k);
        for (e, m) in members.iter().enumerate() {
            if m.len() != k {
                return Err(Error::Shape(format!("member {e} has {} classes, expected {k}", m.len())));
            }
            probs.extend_from_slice(m);
        }
        Self::from_flat(members.len(), k, probs)
    }

    /// Builds a set from an `E x K` row-major buffer, validating every row.
    pub fn from_flat(members: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if members == 0 || classes == 0 || probs.len() != members * classes {
            return Err(Error::Shape(format!(
                "prediction set {members}x{classes} with {} values",
                probs.len()
            )));
        }
        for (e, row) in probs.chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::Data(format!(
                    "member {e} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(PredictionSet {
            members,
            classes,
            probs,
        })
    }

    pub fn ensemble_size(&self) -> usize {
        self.members
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn member(&self, e: usize) -> &[f64] {
        &self.probs[e * self.classes..(e + 1) * self.classes]
    }

    pub fn members(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.classes)
    }

    /// Member mean, accumulated as offsets from the first member so that
    /// identical members give back that member exactly.
    pub fn mean(&self) -> Vec<f64> {
        let first = self.member(0);
        let mut m = vec![0.0; self.classes];
        for row in self.members().skip(1) {
            for ((a, p), p0) in m.iter_mut().zip(row).zip(first) {
                *a += p - p0;
            }
        }
        let inv = 1.0 / self.members as f64;
        m.iter_mut().zip(first).for_each(|(v, p0)| *v = p0 + *v * inv);
        m
    }
}

/// Shannon entropy with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Predictive entropy of the ensemble: entropy of the member mean.
pub fn h_ens(ps: &PredictionSet) -> f64 {
    entropy(&ps.mean())
}

/// Mean member entropy.
pub fn h_cat(ps: &PredictionSet) -> f64 {
    let h0 = entropy(ps.member(0));
    let offsets: f64 = ps.members().skip(1).map(|row| entropy(row) - h0).sum();
    h0 + offsets / ps.ensemble_size() as f64
}

/// `h_ens - h_cat`, clipped at zero against rounding.
pub fn mutual_information(ps: &PredictionSet) -> f64 {
    (h_ens(ps) - h_cat(ps)).max(0.0)
}

fn class_variances(ps: &PredictionSet) -> Vec<f64> {
    // shifted two-moment form: exact zero when all members agree
    let first = ps.member(0);
    let mut s1 = vec![0.0; ps.classes()];
    let mut s2 = vec![0.0; ps.classes()];
    for row in ps.members().skip(1) {
        for (((a, b), p), p0) in s1.iter_mut().zip(s2.iter_mut()).zip(row).zip(first) {
            let d = p - p0;
            *a += d;
            *b += d * d;
        }
    }
    let inv = 1.0 / ps.ensemble_size() as f64;
    s1.iter()
        .zip(&s2)
        .map(|(a, b)| (b * inv - (a * inv) * (a * inv)).max(0.0))
        .collect()
}

/// Sum over classes of the across-member (MLE) variance.
pub fn variance(ps: &PredictionSet) -> f64 {
    class_variances(ps).iter().sum()
}

/// `1 - f_m / E` where `f_m` counts members voting for the modal class.
/// Ties (within a member's argmax or between modes) go to the lowest class.
pub fn variation_ratios(ps: &PredictionSet) -> f64 {
    let mut votes = vec![0usize; ps.classes()];
    for row in ps.members() {
        votes[argmax(row)] += 1;
    }
    let mut mode = 0;
    for (k, &v) in votes.iter().enumerate() {
        if v > votes[mode] {
            mode = k;
        }
    }
    1.0 - votes[mode] as f64 / ps.ensemble_size() as f64
}

/// Class weighting vector for [`variance_weighted`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("class weights must be finite and nonnegative: {weights:?}")));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Config("class weights need at least one positive entry".into()));
        }
        Ok(ClassWeights(weights))
    }

    /// Weight 1 on `class`, 0 elsewhere.
    pub fn one_hot(classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Config(format!("class {class} out of range for {classes} classes")));
        }
        let mut w = vec![0.0; classes];
        w[class] = 1.0;
        Self::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `sum_k w_k Var_e(p_k)`.
pub fn variance_weighted(ps: &PredictionSet, w: &ClassWeights) -> f64 {
    class_variances(ps).iter().zip(w.as_slice()).map(|(v, w)| v * w).sum()
}

/// Reproducible uniform draw in `[0, 1)` for a unit.
pub fn random_score(unit_id: usize, seed: u64) -> f64 {
    (seed::derive(seed, unit_id as u64) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Ids of the `b` highest scores; ties go to the lower id. A request larger
/// than the candidate list is clamped.
pub fn select_top_b(scores: &[(usize, f64)], b: usize) -> Vec<usize> {
    let b = if b > scores.len() {
        log::warn!("requested {b} units but only {} are available; clamping", scores.len());
        scores.len()
    } else {
        b
    };
    let mut order: Vec<&(usize, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().take(b).map(|&(id, _)| id).collect()
}

/// An acquisition function selectable by name.
#[derive(Debug, Clone, PartialEq)]
pub enum Acquisition {
    Random,
    HEns,
    HCat,
    MutualInformation,
    Variance,
    VariationRatios,
    VarianceWeighted(ClassWeights),
}

impl Acquisition {
    /// Resolve a CLI/config name. `var_w` requires class weights.
    pub fn from_name(name: &str, weights: Option<&[f64]>) -> Result<Self> {
        Ok(match name {
            "random" => Acquisition::Random,
            "h_ens" => Acquisition::HEns,
            "h_cat" => Acquisition::HCat,
            "mi" => Acquisition::MutualInformation,
            "var" => Acquisition::Variance,
            "vr" => Acquisition::VariationRatios,
            "var_w" => {
                let w = weights.ok_or_else(|| Error::Config("acquisition var_w needs class weights".into()))?;
                Acquisition::VarianceWeighted(ClassWeights::new(w.to_vec())?)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown acquisition {other:?} (expected one of random, h_ens, h_cat, mi, var, vr, var_w)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Acquisition::Random => "random",
            Acquisition::HEns => "h_ens",
            Acquisition::HCat => "h_cat",
            Acquisition::MutualInformation => "mi",
            Acquisition::Variance => "var",
            Acquisition::VariationRatios => "vr",
            Acquisition::VarianceWeighted(_) => "var_w",
        }
    }

    pub fn needs_predictions(&self) -> bool {
        !matches!(self, Acquisition::Random)
    }

    /// Score one unit. `seed` is only used by [`Acquisition::Random`].
    pub fn score(&self, unit_id: usize, ps: &PredictionSet, seed: u64) -> f64 {
        match self {
            Acquisition::Random => random_score(unit_id, seed),
            Acquisition::HEns => h_ens(ps),
            Acquisition::HCat => h_cat(ps),
            Acquisition::MutualInformation => mutual_information(ps),
            Acquisition::Variance => variance(ps),
            Acquisition::VariationRatios => variation_ratios(ps),
            Acquisition::VarianceWeighted(w) => variance_weighted(ps, w),
        }
    }
}

impl fmt::Display for Acquisition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Acquisition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s, None)
    }
}
