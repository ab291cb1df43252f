//! Experiment driver for the decision-focused allocation methods: config
//! loading, (method, seed) grids, budget sweeps and reports.

pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, Method};
pub use error::{HarnessError, Result};
pub use report::MetricsReport;
pub use runner::{budget_sweep, run_experiment, run_on};
