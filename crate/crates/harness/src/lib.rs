//! Experiment orchestration: toy-data training runs, split sweeps, metrics
//! files, scatter plots and summary tables.

pub mod config;
mod error;
pub mod experiment;
pub mod report;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentOutput};
