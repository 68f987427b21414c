use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("text is empty after normalization")]
    EmptyText,

    #[error("token error: {0}")]
    Token(String),

    /// A lattice row is not a valid log-probability distribution. This is the
    /// observable form of the negative-CTC pathology: a positive entry means
    /// the upstream head did not apply a real log softmax.
    #[error(
        "invalid log-probability lattice: max entry {max_entry:.6e}, worst row residual {max_row_residual:.6e}"
    )]
    InvalidLogProb {
        max_entry: f64,
        max_row_residual: f64,
    },

    #[error("target too long: {frames} frames cannot align a target needing {required} frames")]
    TargetTooLong { frames: usize, required: usize },

    #[error("no masked frames: the mask plan selected nothing")]
    NoMaskedFrames,

    #[error("input too short: encoder output would have zero frames")]
    InputTooShort,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
