//! Semiparametric M-estimation with overparameterized ReLU networks.
//!
//! The crate fits partially linear models `l(Z^T beta, f(X), Y)` by penalized
//! gradient descent on a wide NTK-parameterized network, tracks the matching
//! kernel (RKHS) flow, and provides efficient-score inference for `beta`
//! together with classical baselines and a Monte Carlo harness.

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod linalg;
pub mod losses;
pub mod mlp;
pub mod ntk;
pub mod simgen;
pub mod train;

pub use error::{Error, Result};
