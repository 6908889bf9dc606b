//! Calibration of computer models by identifying and adjusting the
//! parameters whose engineering design values are actually wrong.
//!
//! The pipeline is: fit a surrogate that is affine in the calibration
//! parameters, project the Gaussian kernel onto the orthogonal complement
//! of the surrogate's parameter gradients, then solve an adaptive-lasso
//! penalized generalized least squares problem along a penalty path and
//! pick the penalty by BIC.

pub mod benchmark;
pub mod error;
pub mod estimators;
pub mod kernels;
pub mod pipeline;
pub mod qmc;
pub mod selection;
pub mod surrogate;

pub use error::{Error, Result};
