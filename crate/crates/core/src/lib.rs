//! Class activation maps versus gradient saliency maps for weakly supervised
//! segmentation, at desk scale.

pub mod aggregation;
pub mod attribution;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hyperplane;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod resolve;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil;
