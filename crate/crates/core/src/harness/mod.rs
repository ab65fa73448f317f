//! Experiment configuration, orchestration and reporting.

pub mod config;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Scheme};
pub use run::{run_cell, run_experiment, MetricsRecord, Setup};
