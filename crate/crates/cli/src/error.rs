use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit status for configuration and usage errors.
pub const EXIT_CONFIG: u8 = 2;
/// Process exit status for failures while running a valid command.
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: record {record}, field `{field}`: {message}")]
    Manifest {
        path: PathBuf,
        record: usize,
        field: String,
        message: String,
    },
    #[error("{path}: line {line}: {message}")]
    Annotation { path: PathBuf, line: usize, message: String },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error(transparent)]
    Core(#[from] cohesion_core::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Configuration mistakes exit with 2, everything else with 1.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Core(cohesion_core::Error::Config(_)) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}
