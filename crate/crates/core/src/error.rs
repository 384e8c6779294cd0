//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("mean over an empty selection")]
    EmptyMean,
    #[error("concatenation of an empty list")]
    EmptyConcat,
    #[error("loss has no non-ignored positions")]
    EmptyLoss,
    #[error("attention mask row {row} has no allowed keys")]
    MaskedOutRow { row: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("batch of {tokens} padded tokens exceeds max_tokens {max}")]
    Oversize { tokens: usize, max: usize },
    #[error("checkpoint error ({tensor}): {msg}")]
    Checkpoint { tensor: String, msg: String },
    #[error("nothing to collect: {0}")]
    NothingToCollect(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn csv(path: impl AsRef<std::path::Path>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
