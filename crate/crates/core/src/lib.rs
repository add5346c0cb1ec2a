//! Early-exit-assisted single-forward-pass ensembles for uncertainty
//! estimation in tiny CNNs, with the baselines, metrics, corruptions and
//! drift monitor needed to evaluate them.
//!
//! Everything runs on 32-bit tensors with 64-bit accumulation in
//! reductions. Experiments are deterministic given a seed.

pub mod baselines;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod monitor;
pub mod qute;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
