use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("requested T60 {t60} s is infeasible for this room (absorption {alpha:.4} > 1)")]
    InfeasibleT60 { t60: f64, alpha: f64 },

    #[error("insufficient decay range: {range_db:.1} dB (need at least 30 dB)")]
    InsufficientDecay { range_db: f64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint migration: {0}")]
    Migration(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_err(expected: &[usize], got: &[usize]) -> Error {
    Error::Shape {
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}
