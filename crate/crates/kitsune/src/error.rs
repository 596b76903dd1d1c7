use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// JSON that does not match the expected layout, with a 1-based position.
    #[error("{origin}:{line}:{column}: {message}")]
    Parse { origin: String, line: usize, column: usize, message: String },
    #[error("{origin}: {source}")]
    Model {
        origin: String,
        #[source]
        source: kitsune_core::Error,
    },
    /// A check that should never fail did.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invariant(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn model(origin: impl Into<String>, source: kitsune_core::Error) -> Self {
        CliError::Model { origin: origin.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
