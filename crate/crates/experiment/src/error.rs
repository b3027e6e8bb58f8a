//! Command errors and their process exit codes.

use seqdistill::data::DataError;
use seqdistill::distill::DistillError;
use seqdistill::eval::EvalError;
use seqdistill::model::ModelError;
use seqdistill::profile::ProfileError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Exit code 3: an input artifact is missing or no longer matches its
    /// recorded digest.
    #[error("artifact error: {0}")]
    Artifact(String),
    /// Exit code 4.
    #[error("external service failure: {0}")]
    External(String),
    /// Exit code 5: another process holds the run directory.
    #[error("{0}")]
    Locked(String),
    /// Exit code 1.
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::External(_) => 4,
            CliError::Locked(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("json: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingColumn(_) | DataError::InvalidFraction(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Client(_) => CliError::External(e.to_string()),
            ProfileError::DigestMismatch { .. } => CliError::Artifact(e.to_string()),
            ProfileError::Template(_)
            | ProfileError::Projection(_)
            | ProfileError::DimensionMismatch { .. } => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ModelError::Checkpoint(_) => CliError::Artifact(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::InvalidConfig(_) | DistillError::DimensionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            DistillError::Model(m) => m.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidK => CliError::Config(e.to_string()),
            EvalError::Model(m) => m.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}
