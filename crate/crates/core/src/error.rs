use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input too short: need at least {required} samples, got {actual}")]
    InputTooShort { required: usize, actual: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate sequence: length {length} must exceed the offset count {offsets}")]
    DegenerateSequence { length: usize, offsets: usize },

    #[error("target of length {target_len} cannot be aligned to {frames} frames")]
    Alignment { frames: usize, target_len: usize },

    #[error("brute-force oracle limited to T <= {max_frames} and vocab <= {max_vocab}")]
    OracleScope { max_frames: usize, max_vocab: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined rate: reference corpus is empty")]
    UndefinedRate,

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
