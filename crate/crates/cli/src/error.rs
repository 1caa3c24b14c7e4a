//! Exit-code classification: 2 usage, 3 validation, 4 runtime.

use gridseq_core::data::DataError;
use gridseq_core::grid::GridError;
use gridseq_core::pipeline::{OracleError, PipelineError};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn grid_code(e: &GridError) -> u8 {
    match e {
        GridError::Io { .. } => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Io { .. } | DataError::Env(_) => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        Self {
            code: grid_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self {
            code: data_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_)
            | PipelineError::FeederMismatch { .. }
            | PipelineError::Checkpoint(_)
            | PipelineError::Model(_) => EXIT_VALIDATION,
            PipelineError::Grid(g) => grid_code(g),
            PipelineError::Data(d) => data_code(d),
            PipelineError::Oracle(OracleError::TooLarge { .. } | OracleError::Horizon { .. }) => EXIT_VALIDATION,
            PipelineError::Io { .. }
            | PipelineError::Env(_)
            | PipelineError::Nn(_)
            | PipelineError::Diverged { .. }
            | PipelineError::Oracle(_) => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        PipelineError::from(e).into()
    }
}
