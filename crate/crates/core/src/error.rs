//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is malformed (non-finite data, bad
    /// dimensions, out-of-range tuning parameter).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The column-role mapping does not match the table (missing or
    /// duplicated role, unknown column name).
    #[error("column specification error: {0}")]
    Spec(String),

    /// The data table itself is unusable (missing cell, non-numeric entry).
    #[error("data error: {0}")]
    Data(String),

    /// Exact rank failure: the design matrices violate the full-column-rank
    /// condition, so the estimators are not uniquely defined. This is exact
    /// collinearity, not weak instruments.
    #[error("identification data error: {0}")]
    IdentificationData(String),

    /// The sample is too small for the requested statistics (a degrees-of-
    /// freedom constant is zero or negative).
    #[error("degenerate dimensions: {0}")]
    DegenerateDims(String),

    /// A simulated error vector was unusable.
    #[error("draw {replication} failed: {message}")]
    Draw { replication: usize, message: String },

    /// I/O failure while reading input data.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// CSV parsing failure.
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
