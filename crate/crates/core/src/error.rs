use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("alpha must lie in [1, 2], got {0}")]
    InvalidAlpha(f64),

    #[error("temperature must be positive: {0}")]
    InvalidTemperature(f64),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("batch norm in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dimension mismatch in mode `{mode}`: {detail}")]
    DimensionMismatch { mode: String, detail: String },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("no evaluable users")]
    NoEvaluableUsers,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by input files or dataset contents rather
    /// than by the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::DimensionMismatch { .. }
                | Error::Format { .. }
                | Error::DegenerateSplit(_)
                | Error::Json(_)
        )
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
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

pub type Result<T> = std::result::Result<T, Error>;
