use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("artifact hash mismatch: {0}")]
    HashMismatch(String),
    #[error("{0}")]
    Stage(String),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Stage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Metric(_) => 4,
            CliError::HashMismatch(_) => 5,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub(crate) fn stage(e: impl std::fmt::Display) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<leadi_core::eval::EvalError> for CliError {
    fn from(e: leadi_core::eval::EvalError) -> Self {
        CliError::Metric(e.to_string())
    }
}
