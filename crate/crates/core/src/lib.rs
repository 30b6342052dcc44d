//! Double policy estimation: importance-sampled policy gradients for
//! return-conditioned sequence models, where both the behavior and the target
//! densities are maximum-likelihood estimates and a fitted baseline is
//! subtracted from the returns.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod estimators;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod theory;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
