//! Minimal differentiable network engine.

mod arch;
mod init;
mod layer;
mod loss;
mod network;
pub(crate) mod ops;
mod optim;

pub use arch::{mlp, residual_cnn, seg_encoder, seg_head, Architecture};
pub use init::he_initialize;
pub use layer::{validate_layers, LayerSpec, ParamInfo};
pub use loss::cross_entropy;
pub use network::{BnRunning, Gradients, Mode, Network};
pub use ops::{BN_EPS, BN_MOMENTUM};
pub use optim::{sgd_step, SgdState};
