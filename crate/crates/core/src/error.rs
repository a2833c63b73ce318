use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Input outside the mathematical domain of an operation (e.g. log of 0).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A forward value or gradient left the finite range.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed file content; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    /// Counts or provenance records that do not add up.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A latent search produced a non-finite loss; `trajectory` holds the
    /// losses up to and including the failing iteration.
    #[error("latent search diverged at iteration {iteration}: {detail}")]
    SearchDiverged {
        iteration: usize,
        detail: String,
        trajectory: Vec<f64>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
