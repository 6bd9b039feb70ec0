use thiserror::Error;

pub type Result<T> = std::result::Result<T, SidError>;

#[derive(Debug, Error)]
pub enum SidError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A backward pass was requested for a forward run that did not keep its cache.
    #[error("forward cache missing for {0}; rerun the forward pass with keep_cache enabled")]
    MissingCache(&'static str),

    #[error(
        "teacher cache generated at step {generated} is stale at step {current} (limit {limit})"
    )]
    StaleTeachers {
        generated: u64,
        current: u64,
        limit: u64,
    },

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SidError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        SidError::Dimension(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        SidError::InvalidInput(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        SidError::InvalidParameter(msg.into())
    }
}
