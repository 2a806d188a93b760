use radcam_core::CoreError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("artifact mismatch: {0}")]
    Artifact(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Artifact(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::ConfigInvalid { .. }
            | CoreError::Unsatisfiable { .. }
            | CoreError::InsufficientFrames { .. }
            | CoreError::WindowTooLarge { .. }
            | CoreError::EmptyWindow => CliError::Config(msg),
            CoreError::Io(_) => CliError::Io(msg),
            CoreError::VersionMismatch { .. }
            | CoreError::Format(_)
            | CoreError::PredictionCountMismatch { .. }
            | CoreError::EmptyDataset
            | CoreError::Nn(_) => CliError::Artifact(msg),
            CoreError::NonFinite(_)
            | CoreError::DegenerateNorm(_)
            | CoreError::GimbalLock(_)
            | CoreError::NotARotation(_)
            | CoreError::EmptyInput => CliError::Numeric(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
