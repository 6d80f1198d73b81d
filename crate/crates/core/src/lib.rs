//! Batch active learning with a GFlowNet batch sampler over a Gaussian
//! process regressor.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod gp;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod subtb;

pub use error::{Error, Result};
