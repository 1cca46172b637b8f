use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("truncation error: {what} misses weight {:.3e} (at most {:.3e} allowed)", 1.0 - captured, 1.0 - required)]
    Truncation { what: String, captured: f64, required: f64 },

    #[error("integration accuracy error: {0}")]
    IntegrationAccuracy(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }
}
