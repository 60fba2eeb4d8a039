use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty token sequence")]
    EmptySequence,

    #[error("decode step out of order: expected {expected}, got {got}")]
    OutOfOrderStep { expected: usize, got: usize },

    #[error("notify_intervention called without a pending trigger")]
    DoubleNotify,

    #[error("position {position} is not contiguous with the prefix (expected {expected})")]
    NonContiguousPosition { expected: usize, position: usize },

    #[error("keep set is empty")]
    EmptyKeepSet,

    #[error("position {0} is not present in the cache")]
    UnknownPosition(usize),

    #[error("attention weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),

    #[error("cache shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cannot build a keep set at t={t} with {n_anchor} anchors")]
    TooEarlyToPrune { t: usize, n_anchor: usize },

    #[error("bad span [{start}, {end}] is invalid at t={t}")]
    InvalidBadSpan { start: usize, end: usize, t: usize },

    #[error("head dimension must be even and positive, got {0}")]
    OddHeadDim(usize),

    #[error("index {index} is after the query position {t}")]
    Causality { index: usize, t: usize },

    #[error("accessible set is empty")]
    EmptyAccessibleSet,

    #[error("index {0} is outside the tail window")]
    OutsideTail(usize),

    #[error("attention history is ragged: {0}")]
    RaggedHistory(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no valid records")]
    NoRecords,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    /// True for errors caused by bad input rather than a library fault.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Serialize(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
