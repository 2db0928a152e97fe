use rand_distr::{Distribution, Normal};

use crate::kl::ParamRole;
use crate::seed;

use super::Network;

/// He initialization with the fan-out variance `2 / (n_o * w * h)`: every
/// convolution and linear weight is drawn from its prior, batchnorm scales
/// are set to 1 and shifts to 0. Batchnorm running statistics are reset.
pub fn he_initialize(mut net: Network, seed: u64) -> Network {
    let mut rng = seed::rng(seed);
    let infos = net.param_infos().to_vec();
    for (p, info) in net.params_mut().iter_mut().zip(&infos) {
        match info.role {
            ParamRole::ConvWeight | ParamRole::LinearWeight => {
                let normal = Normal::new(0.0, info.prior.var.sqrt()).expect("positive prior variance");
                p.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            ParamRole::BnWeight => p.data_mut().fill(1.0),
            ParamRole::BnBias => p.data_mut().fill(0.0),
        }
    }
    for r in net.running_stats_mut() {
        r.mean.fill(0.0);
        r.var.fill(1.0);
    }
    net
}
