use std::path::PathBuf;

use brachiation::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    #[error("solver stopped after {iterations} iterations without converging")]
    NotConverged { iterations: usize },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 1 for usage, configuration and input problems, 2 for numerical
    /// failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Config(_)
            | CliError::Io { .. }
            | CliError::Format { .. } => 1,
            CliError::NotConverged { .. } => 2,
            CliError::Core(e) => match e {
                CoreError::InvalidParams { .. }
                | CoreError::InvalidProblem(_)
                | CoreError::Unreachable { .. }
                | CoreError::DegenerateBearing
                | CoreError::OutOfRange { .. } => 1,
                CoreError::LinearSolveFailure
                | CoreError::NonFiniteState { .. }
                | CoreError::NoMinimumFound { .. }
                | CoreError::NotPositiveDefinite { .. }
                | CoreError::Diverged(_)
                | CoreError::NotCaught { .. } => 2,
            },
        }
    }
}
