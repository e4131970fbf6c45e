use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("distribution support error: {0}")]
    DistributionSupport(String),

    #[error("empty batch: every supervision mask is empty")]
    EmptyBatch,

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("rejection sampling exhausted after {tries} tries: {what}")]
    RejectionExhausted { tries: usize, what: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::InvalidArgument(msg.into()))
}
