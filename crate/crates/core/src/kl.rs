//! KL regularization over cross-member parameter statistics.
//!
//! Each trainable parameter takes E values across the ensemble. Their
//! maximum-likelihood mean and variance stand in for a Gaussian `q`, which
//! is pulled towards a Gaussian prior `p` chosen per parameter role. For a
//! single parameter the penalty is
//!
//! ```text
//! log var_q + (var_p + (mu_q - mu_p)^2) / var_q
//! ```
//!
//! i.e. twice the closed-form Gaussian KL with the terms independent of `q`
//! dropped. Convolution and linear weights use `mu_p = 0` and the He
//! variance `2 / (n_o * w * h)`; batchnorm weights and biases use
//! `var_p = 0.01` with `mu_p` equal to 1 and 0 respectively.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to the cross-member variance.
pub const EPS_VAR: f64 = 1e-8;

/// Prior variance of batchnorm weights and biases.
pub const BN_PRIOR_VAR: f64 = 0.01;

/// Role of a trainable parameter; decides its prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    LinearWeight,
    BnWeight,
    BnBias,
}

impl ParamRole {
    pub fn code(self) -> u8 {
        match self {
            ParamRole::ConvWeight => 0,
            ParamRole::LinearWeight => 1,
            ParamRole::BnWeight => 2,
            ParamRole::BnBias => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamRole::ConvWeight,
            1 => ParamRole::LinearWeight,
            2 => ParamRole::BnWeight,
            3 => ParamRole::BnBias,
            _ => return None,
        })
    }
}

/// Gaussian prior `N(mu, var)` for one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mu: f64,
    pub var: f64,
}

impl Prior {
    pub fn new(mu: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() || !mu.is_finite() {
            return Err(Error::Domain(format!(
                "prior needs finite mean and positive variance, got N({mu}, {var})"
            )));
        }
        Ok(Prior { mu, var })
    }

    /// He prior for a ReLU convolution with `out_channels` kernels of `w x h`.
    pub fn conv(out_channels: usize, w: usize, h: usize) -> Self {
        Prior {
            mu: 0.0,
            var: 2.0 / (out_channels * w * h) as f64,
        }
    }

    /// Linear layers are treated as 1x1 convolutions.
    pub fn linear(out_features: usize) -> Self {
        Self::conv(out_features, 1, 1)
    }

    pub fn bn_weight() -> Self {
        Prior {
            mu: 1.0,
            var: BN_PRIOR_VAR,
        }
    }

    pub fn bn_bias() -> Self {
        Prior {
            mu: 0.0,
            var: BN_PRIOR_VAR,
        }
    }
}

/// One logical parameter tensor, viewed across all ensemble members.
#[derive(Debug, Clone)]
pub struct ParameterGroup<'a> {
    pub name: String,
    pub role: ParamRole,
    pub prior: Prior,
    members: Vec<&'a Tensor>,
}

impl<'a> ParameterGroup<'a> {
    pub fn new(
        name: impl Into<String>,
        role: ParamRole,
        prior: Prior,
        members: Vec<&'a Tensor>,
    ) -> Result<Self> {
        let name = name.into();
        let Some(first) = members.first() else {
            return Err(Error::Config(format!("group {name} has no members")));
        };
        if let Some(bad) = members.iter().find(|m| m.shape() != first.shape()) {
            return Err(Error::Shape(format!(
                "group {name}: member shapes {:?} and {:?} differ",
                first.shape(),
                bad.shape()
            )));
        }
        Ok(ParameterGroup {
            name,
            role,
            prior,
            members,
        })
    }

    pub fn members(&self) -> &[&'a Tensor] {
        &self.members
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    /// Number of scalar parameters per member.
    pub fn len(&self) -> usize {
        self.members[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-parameter mean and floored MLE variance across members.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMemberStats {
    pub mu: Tensor,
    pub var: Tensor,
    /// True where the raw variance fell below [`EPS_VAR`].
    pub floored: Vec<bool>,
}

pub fn stats(group: &ParameterGroup<'_>) -> Result<CrossMemberStats> {
    let e = group.ensemble_size();
    if e < 2 {
        return Err(Error::Config(format!(
            "group {}: cross-member variance needs at least 2 members, got {e}",
            group.name
        )));
    }
    let n = group.len();
    let inv_e = 1.0 / e as f64;
    let mut mu = vec![0.0; n];
    for m in group.members() {
        for (acc, v) in mu.iter_mut().zip(m.data()) {
            *acc += v;
        }
    }
    mu.iter_mut().for_each(|v| *v *= inv_e);

    let mut var = vec![0.0; n];
    for m in group.members() {
        for ((acc, v), mean) in var.iter_mut().zip(m.data()).zip(&mu) {
            let d = v - mean;
            *acc += d * d;
        }
    }
    let mut floored = vec![false; n];
    for (v, f) in var.iter_mut().zip(floored.iter_mut()) {
        *v *= inv_e;
        if *v < EPS_VAR {
            *v = EPS_VAR;
            *f = true;
        }
    }
    let shape = group.members()[0].shape().to_vec();
    Ok(CrossMemberStats {
        mu: Tensor::new(shape.clone(), mu)?,
        var: Tensor::new(shape, var)?,
        floored,
    })
}

/// `KL(q || p)` between two univariate Gaussians, in the closed form
/// `0.5 * (log(var_q / var_p) + (var_p + (mu_q - mu_p)^2) / var_q - 1)`.
///
/// Note the quadratic term divides by `var_q`: as written this is the
/// textbook `KL(p || q)` up to the log term's sign convention. It is kept
/// verbatim because the layer penalty is derived from exactly this form.
pub fn kl_gaussian(mu_q: f64, var_q: f64, mu_p: f64, var_p: f64) -> Result<f64> {
    if !(var_q > 0.0) || !(var_p > 0.0) {
        return Err(Error::Domain(format!(
            "variances must be positive, got var_q={var_q}, var_p={var_p}"
        )));
    }
    let d = mu_q - mu_p;
    Ok(0.5 * ((var_q / var_p).ln() + (var_p + d * d) / var_q - 1.0))
}

/// Penalty of one parameter with cross-member statistics `(mu, var)`.
#[inline]
pub fn param_penalty(mu: f64, var: f64, prior: Prior) -> f64 {
    let d = mu - prior.mu;
    var.ln() + (prior.var + d * d) / var
}

/// Partial derivatives of [`param_penalty`] with respect to `mu` and `var`.
#[inline]
pub fn param_penalty_partials(mu: f64, var: f64, prior: Prior) -> (f64, f64) {
    let d = mu - prior.mu;
    let d_mu = 2.0 * d / var;
    let d_var = 1.0 / var - (prior.var + d * d) / (var * var);
    (d_mu, d_var)
}

/// Penalty of a whole parameter tensor: sum of [`param_penalty`] over entries.
pub fn layer_penalty(group: &ParameterGroup<'_>) -> Result<f64> {
    let s = stats(group)?;
    Ok(s
        .mu
        .data()
        .iter()
        .zip(s.var.data())
        .map(|(&m, &v)| param_penalty(m, v, group.prior))
        .sum())
}

/// Total penalty over every group of the ensemble.
pub fn omega(groups: &[ParameterGroup<'_>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Config("omega needs at least one group".into()));
    }
    groups.iter().map(layer_penalty).sum()
}

/// Gradient of [`omega`] with respect to every member's copy of every
/// group, indexed `[group][member]`.
///
/// Chain rule through the statistics: `d mu / d theta_e = 1/E` and
/// `d var / d theta_e = 2 (theta_e - mu) / E`. Where the variance floor is
/// active only the mean path contributes.
pub fn omega_grad(groups: &[ParameterGroup<'_>]) -> Result<Vec<Vec<Tensor>>> {
    groups.iter().map(group_grad).collect()
}

fn group_grad(group: &ParameterGroup<'_>) -> Result<Vec<Tensor>> {
    let s = stats(group)?;
    let e = group.ensemble_size() as f64;
    let partials: Vec<(f64, f64)> = s
        .mu
        .data()
        .iter()
        .zip(s.var.data())
        .zip(&s.floored)
        .map(|((&m, &v), &floored)| {
            let (d_mu, d_var) = param_penalty_partials(m, v, group.prior);
            (d_mu / e, if floored { 0.0 } else { 2.0 * d_var / e })
        })
        .collect();
    group
        .members()
        .iter()
        .map(|member| {
            let data = member
                .data()
                .iter()
                .zip(s.mu.data())
                .zip(&partials)
                .map(|((&theta, &m), &(g_mu, g_var))| g_mu + g_var * (theta - m))
                .collect();
            Tensor::new(member.shape().to_vec(), data)
        })
        .collect()
}
