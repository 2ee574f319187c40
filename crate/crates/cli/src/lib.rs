//! Batch driver for the routing laboratory: loads a TOML config, generates
//! or ingests a dataset, runs press sweeps over an alpha grid, aggregates
//! metrics into CSV/JSON artifacts, and executes the proposition suites.
//!
//! All outputs are plain data files; rendering is left to external tools.
//! Runs are deterministic: the same configuration writes byte-identical
//! artifacts.

use thiserror::Error;

pub mod config;
pub mod run;

pub use config::{LabConfig, Overrides};
pub use run::{run_propositions, run_sweep, PropositionsReport, SweepSummary};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration file, flag value, or parameter range. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Input data failed validation (dataset grounding, schema). Exit code 3.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Unexpected internal failure (a bug, not a user error).
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Validation(_) => 3,
            _ => 1,
        }
    }
}

impl From<kvroute_core::sweep::SweepError> for CliError {
    fn from(e: kvroute_core::sweep::SweepError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<kvroute_core::metrics::MetricsError> for CliError {
    fn from(e: kvroute_core::metrics::MetricsError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<kvroute_core::propositions::PropError> for CliError {
    fn from(e: kvroute_core::propositions::PropError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<toml::ser::Error> for CliError {
    fn from(e: toml::ser::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
