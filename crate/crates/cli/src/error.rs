//! Error classes and their exit codes.

use paircam::io::IoError;
use paircam::oracle::OracleError;
use paircam::pipeline::PipelineError;
use paircam::reconstruct::ReconstructError;
use paircam::sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed or invalid configuration or query.
    #[error("config error: {0}")]
    Config(String),
    /// Missing files, mismatched data, I/O failures.
    #[error("{0}")]
    Data(String),
    /// Truncation or convergence failure.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn field(path: &str, message: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{path}: {message}"))
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Truncation { .. } => CliError::Numerical(e.to_string()),
            OracleError::Domain(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Oracle(o) => o.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ReconstructError> for CliError {
    fn from(e: ReconstructError) -> Self {
        match e {
            ReconstructError::NonConvergence { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Sim(s) => s.into(),
            PipelineError::Reconstruct(r) => r.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}
