use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("span {start}..{end} out of range for sequence of length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("K = {k} exceeds proposal count M = {m}")]
    TooFewProposals { k: usize, m: usize },

    #[error("instance too large for exhaustive enumeration ({0} assignments)")]
    InstanceTooLarge(f64),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
