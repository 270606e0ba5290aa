//! Subgroup-fair classification by doubly-regressing adversarial training.
//!
//! The crate trains a small sigmoid-output MLP under a fairness penalty that
//! upper-bounds the worst integral probability metric over a curated
//! collection of subgroup-subsets, using a single sigmoid-affine
//! discriminator plus a unit-sphere weight vector. It also ships the exact
//! parity metrics (SP, marginal parity, Wasserstein marginal parity), two
//! gradient-based baselines, brute-force verification oracles, and a CLI.

pub mod cli;
pub mod data;
pub mod fairness;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod subsets;
pub mod train;

mod error;

pub use error::{Error, Result};
