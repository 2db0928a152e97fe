//! Deep probabilistic ensembles for pool-based active learning.
//!
//! An ensemble of small networks is trained jointly under a KL penalty on
//! the cross-member statistics of every parameter, and its disagreement
//! drives batch-mode sample selection for classification and crop-based
//! semantic segmentation.

pub mod acquisition;
pub mod active;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod kl;
pub mod nn;
pub mod report;
pub mod seed;
pub mod seg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
