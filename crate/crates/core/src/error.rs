use crate::blsr::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("softmax over an all-masked score vector")]
    AllMasked,

    #[error("timestamps decrease at shot {index}")]
    DecreasingTimestamps { index: usize },

    #[error("empty rally")]
    EmptyRally,

    #[error("metric requires both positive and negative labels")]
    SingleClass,

    #[error("metric requires at least one prediction")]
    EmptyInput,

    #[error("need at least 3 matches to split, found {0}")]
    TooFewMatches(usize),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
