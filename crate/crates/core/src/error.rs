use thiserror::Error;

/// Errors produced by the toolkit, grouped by how the CLI maps them to
/// exit codes: configuration/usage problems, data problems, and numeric
/// failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied an argument that violates an operation's
    /// precondition (bad shape, empty grid, zero count, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes do not conform for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Input data is malformed or insufficient (CSV schema violations,
    /// recordings too short, not enough instances for a task, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A forward or backward pass produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn non_finite(msg: impl Into<String>) -> Self {
        Error::NonFinite(msg.into())
    }
}
