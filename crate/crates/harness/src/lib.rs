//! Experiment harness: datasets, the method grid, metrics and result files.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod summary;
pub mod theorems;

pub use config::{ExperimentConfig, Method, MetricsConfig, Problem};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, ExperimentOutcome, ExperimentResult};
