use std::fmt;
use std::path::Path;

use fsmp_core::Error;

/// Failure categories, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// A report was produced but one of its checks failed.
    CheckFailed(String),
    Config(String),
    Numeric(String),
    Io(String),
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
            CliError::NotConverged(_) => 5,
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::NotConverged(m) => write!(f, "not converged: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NotConverged { .. } => CliError::NotConverged(msg),
            Error::NotPositiveDefinite { .. }
            | Error::NonFiniteValue { .. }
            | Error::OutOfControlSet { .. }
            | Error::TerminalConditionViolated(_)
            | Error::DualityMismatch { .. }
            | Error::NoDescent { .. }
            | Error::InvalidModel(_) => CliError::Numeric(msg),
            _ => CliError::Config(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
