//! Experiment runner: reads a TOML config, runs solve, validate-grad, or
//! optimize, and writes PFM images and CSV logs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{run, RunOptions, RunSummary};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) | CliError::Runtime(_) => 2,
            CliError::ValidationFailed(_) => 3,
        }
    }
}
