use thiserror::Error;

/// Errors produced by dataset construction, IO and the estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: String, msg: String },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("estimator failure: {0}")]
    Estimator(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
