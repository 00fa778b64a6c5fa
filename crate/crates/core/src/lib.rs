//! Semantic segmentation with dynamic Gaussian receptive fields, refined per
//! input at inference time by minimizing thresholded output entropy over the
//! classifier and scale-regressor filters.

pub mod adapt;

pub mod data;
pub mod error;
pub mod model;
pub mod objective;
pub mod scalespace;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dims, Precision, Real, Tensor};
