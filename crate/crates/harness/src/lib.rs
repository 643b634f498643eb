//! Experiment harness: configuration files, cross-validated runs, summary
//! comparison and plot-ready series.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use experiment::{run, write_outputs, RunOutput, RunSummary};
