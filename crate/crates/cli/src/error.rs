use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] segfuse_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use segfuse_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::InvalidInput(_) | E::InvalidSpec(_) | E::Config(_) | E::Format { .. }) => 1,
            CliError::Core(E::Training(_) | E::Io(_)) => 2,
            CliError::Io { .. } | CliError::Runtime(_) => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
