//! Experiment driver: configuration, pipeline stages and on-disk artifacts.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod store;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult, ExitKind};
