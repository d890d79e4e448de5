//! Experiment runner for the CIM quantization simulator: JSON configs,
//! dataset loading, checkpoints and the `infer`, `train`, `sweep`,
//! `histogram` and `cost-report` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
