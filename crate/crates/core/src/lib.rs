//! Adaptive multi-fidelity Gaussian-process reliability analysis.

// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active_loop;
pub mod benchmarks;
pub mod error;
pub mod experiment;
pub mod learning;
pub mod mfgp;
pub(crate) mod optim;
pub mod par;
pub mod probability;

pub use error::{Error, Result};
