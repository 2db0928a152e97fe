use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Network;

/// SGD with velocity-form momentum: `v = momentum * v + g; theta -= lr * v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &[Tensor], learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    pub fn for_network(net: &Network, learning_rate: f64, momentum: f64) -> Result<Self> {
        Self::new(net.params(), learning_rate, momentum)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "sgd: {} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "sgd: parameter {:?}, gradient {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
        }
        let (lr, mom) = (self.learning_rate, self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mom * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(net: &mut Network, grads: &[Tensor], state: &mut SgdState) -> Result<()> {
    state.step(net.params_mut(), grads)
}
