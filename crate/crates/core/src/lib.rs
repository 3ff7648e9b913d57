//! Flatness-aware first-order optimization.
//!
//! The crate bundles four pieces that are meant to be used together:
//!
//! - [`objective`]: deterministic gradient oracles (quadratics, Rosenbrock,
//!   a double well and a tanh MLP with softmax cross-entropy) plus
//!   finite-difference Hessian-vector products.
//! - [`optim`]: the flatness-aware update that mixes zeroth- and
//!   first-order sharpness penalties, its SAM/GAM special cases, the usual
//!   SGD/momentum/Adam/AdamW baselines, a training loop and a convergence
//!   diagnostic.
//! - [`flatness`]: ball-maximum flatness estimators, the eigenvalue identity
//!   linking them to the dominant Hessian eigenvalue, power iteration with
//!   deflation and Hutchinson trace estimation.
//! - [`bench`]: synthetic covariate-shift domains and a leave-one-domain-out
//!   evaluation protocol with random hyperparameter search.

pub mod bench;
pub mod data;
pub mod error;
pub mod flatness;
pub mod objective;
pub mod optim;
pub mod param;
pub mod rng;

pub use data::{sample_batch, Batch, Dataset};
pub use error::{Error, Result};
pub use objective::{GradientOracle, Objective};
pub use param::ParamVector;
