use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fdkf_core::Error),

    /// Manifests handed to `compare` do not cover the same scenarios.
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),

    #[error("{0}")]
    Usage(String),
}

/// Machine-readable error report printed on failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::ScenarioMismatch(_) => "scenario_mismatch",
            CliError::Usage(_) => "usage",
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            kind: self.kind().to_owned(),
            message: self.to_string(),
        }
    }
}
