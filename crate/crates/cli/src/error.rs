use thiserror::Error;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("stage {stage} needs {what}; run it first")]
    Missing { stage: String, what: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("reproducibility check failed: {0}")]
    Repro(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Repro(_) | CliError::Other(_) => 1,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl From<nowcast_core::Error> for CliError {
    fn from(e: nowcast_core::Error) -> Self {
        use nowcast_core::Error as E;
        match e {
            E::Io(_) | E::Json(_) | E::Csv(_) | E::Format(_) => CliError::Other(e.into()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<nowcast_model::ModelError> for CliError {
    fn from(e: nowcast_model::ModelError) -> Self {
        use nowcast_model::ModelError as E;
        match e {
            E::Io(_) | E::Json(_) | E::Checkpoint(_) => CliError::Other(e.into()),
            E::Core(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
