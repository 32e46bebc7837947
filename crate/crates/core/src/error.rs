use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("need at least 2 candidates, got {0}")]
    InsufficientCandidates(usize),

    #[error("need at least 2 heads, got {0}")]
    InsufficientHeads(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cache capacity exceeded: length {len} >= max_seq {max}")]
    Capacity { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of bounds for length {len}")]
    Index { index: usize, len: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("malformed weights file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
