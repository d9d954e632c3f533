use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{}:{line}: field `{field}`: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        msg: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Input(_)
                | Error::Usage(_)
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::Checkpoint(_)
                | Error::Io { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
