use thiserror::Error;

/// Failures of a CLI invocation, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 1.
    #[error("configuration error: {0}")]
    Config(String),

    /// Anything that goes wrong while doing the work; exit code 2.
    #[error(transparent)]
    Runtime(#[from] scmis::Error),

    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) | CliError::Failed(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
