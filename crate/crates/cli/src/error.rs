use std::path::Path;

use evio_core::eval::EvalError;
use evio_core::pipeline::PipelineError;
use thiserror::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_INIT: u8 = 4;
pub const EXIT_PIPELINE: u8 = 5;
pub const EXIT_NO_OVERLAP: u8 = 6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Input { path: String, msg: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn input(path: &Path, msg: impl ToString) -> Self {
        CliError::Input {
            path: path.display().to_string(),
            msg: msg.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Pipeline(PipelineError::Config(_)) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Input { .. } => EXIT_IO,
            CliError::Pipeline(PipelineError::InitNotReached { .. }) => EXIT_INIT,
            CliError::Pipeline(_) => EXIT_PIPELINE,
            CliError::Eval(EvalError::NoOverlap) => EXIT_NO_OVERLAP,
            CliError::Eval(_) => EXIT_IO,
        }
    }
}
