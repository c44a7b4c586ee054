//! Bayesian identification of multiple-input single-output FIR systems under
//! collinear inputs.
//!
//! Each impulse response gets a zero-mean Gaussian prior whose covariance is a
//! scaled first-order stable spline kernel. The posterior is explored by Gibbs
//! sampling, optionally complemented with overlapping two-channel block updates
//! whose selection frequency grows with the correlation between the inputs.

pub mod blocks;
pub mod conditionals;
pub mod error;
pub mod kernel;
pub mod oracle;
pub mod persist;
pub mod regression;
pub mod sampler;
pub mod simgen;

pub use error::{Error, Result};
pub use kernel::StableSplineKernel;
pub use regression::{CoefficientVector, CrossProducts, Dataset, Problem, RegressorBank};
