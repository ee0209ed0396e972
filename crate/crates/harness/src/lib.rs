//! Experiment plumbing around `rsd-core`: configuration, datasets, paired
//! evaluation tables, budget sweeps and the `rsd` command line.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod report;

pub use config::{ExperimentConfig, Method, OracleSpec, PolicySettings};
