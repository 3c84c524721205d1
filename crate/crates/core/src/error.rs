use thiserror::Error;

/// Errors produced by the flow engine, the trainer and the test statistics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate batch: training-mode batch norm needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("ensemble member with seed {seed} failed: {source}")]
    EnsembleMember {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient pool: {0}")]
    InsufficientPool(String),

    #[error("temperature bracket is not monotone: {0}")]
    NonMonotone(String),

    #[error("labels contain a single class: {0}")]
    SingleClass(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that stem from numeric blow-up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::EnsembleMember { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
