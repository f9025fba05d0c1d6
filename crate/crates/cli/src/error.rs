use std::path::Path;

/// Command failure, classified by the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    #[error("usage: {0}")]
    Usage(String),
    /// Missing, corrupt or mismatched inputs (exit 2).
    #[error("data: {0}")]
    Data(String),
    /// Training divergence or unusable model output (exit 3).
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn data(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
