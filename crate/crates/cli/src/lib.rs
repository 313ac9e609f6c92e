//! Experiment driver: configuration, CSV output and the four subcommands.

pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

pub use commands::{invariants, mfe_order, resonance_scan, simulate, Outcome};
pub use config::{ExperimentConfig, StepSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] strata::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(strata::Error::BlowUp { .. }) => 3,
            CliError::Core(strata::Error::Resonant { .. }) => 4,
            CliError::Core(_) => 2,
            CliError::Io { .. } => 1,
        }
    }
}
