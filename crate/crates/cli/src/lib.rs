//! Experiment harness: configuration, CSV ingestion, Monte-Carlo runs,
//! grid search, reports and the `drum` command line.

// `!(x >= 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod config;
pub mod error;
pub mod grid;
pub mod manifest;
pub mod model;
pub mod report;
pub mod run;
pub mod simulate;
pub mod table;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
