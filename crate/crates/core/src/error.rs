use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GentleError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GentleError {
    /// Bad configuration value, shape mismatch or conflicting flags.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("{}: expected {expected} rows, found {found}", path.display())]
    RowCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("malformed {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{} is locked by another writer", .0.display())]
    Locked(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GentleError {
    pub fn config(msg: impl Into<String>) -> Self {
        GentleError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            GentleError::MissingInput(path)
        } else {
            GentleError::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        GentleError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 runtime failure, 2 config error, 3 missing input.
    pub fn exit_code(&self) -> i32 {
        match self {
            GentleError::Config(_) | GentleError::Dimension { .. } => 2,
            GentleError::MissingInput(_) => 3,
            _ => 1,
        }
    }
}
