//! Experiment runner for learned auction mechanisms.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use commands::CliError;
pub use config::{ConfigError, ExperimentConfig};
