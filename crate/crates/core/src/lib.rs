//! Targeted smooth Bayesian causal forests.
//!
//! Heterogeneous treatment effects for binary outcomes, with tree-ensemble
//! fits whose leaf parameters vary smoothly over one target covariate. The
//! crate provides the Gibbs/Metropolis backfitting sampler, propensity
//! estimation, prior-scale calibration, causal post-processing (relative
//! risk, number needed to treat, subgroup discovery), and a simulation
//! benchmark harness.

pub mod calibration;
pub mod config;
pub mod data;
pub mod error;
pub mod estimands;
pub mod exec;
pub mod kernel;
pub mod mathutil;
pub mod optim;
pub mod persist;
pub mod propensity;
pub mod rngs;
pub mod sampler;
pub mod simbench;
pub mod tree;

pub use config::{ModelConfig, ResponseMode, TauScaleMode};
pub use data::{Column, CovMatrix, Dataset, Schema, TargetGrid};
pub use error::{Error, Result};
pub use rngs::RngStream;
