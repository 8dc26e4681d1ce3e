//! Configuration, orchestration entry points and reporting for the LOCO-OOD
//! benchmark engine.
//!
//! The library half of the CLI: `main.rs` only parses arguments and maps
//! errors to exit codes (0 success, 2 configuration, 3 data, 4 total run
//! failure).

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_report, cmd_run, cmd_synth, cmd_tune, ReportFlags, RunArtifacts};
pub use config::{load_config, DataSource, ReportFormat, RunConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("run failed: {0}")]
    RunFailure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::RunFailure(_) => 4,
        }
    }
}

impl From<loco_ood::data::DataError> for CliError {
    fn from(e: loco_ood::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<loco_ood::harness::HarnessError> for CliError {
    fn from(e: loco_ood::harness::HarnessError) -> Self {
        use loco_ood::harness::HarnessError as H;
        match &e {
            H::Config(_) | H::BadFractions | H::NeedTuningSubject => {
                CliError::Config(e.to_string())
            }
            H::Data(_) | H::DatasetMismatch(_) => CliError::Data(e.to_string()),
            _ => CliError::RunFailure(e.to_string()),
        }
    }
}
