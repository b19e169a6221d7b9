//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by dataset construction, nuisance fitting and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// A trajectory violates the monotone missingness structure. The payload
    /// names the first offending field.
    #[error("monotone structure violated at field `{field}`{}", row_suffix(.row))]
    MonotoneViolation {
        field: &'static str,
        row: Option<usize>,
    },

    /// A CSV cell could not be parsed. Row indices are 1-based data rows
    /// (the header is row 0).
    #[error("parse error at row {row}, column `{column}`: {message}")]
    ParseError {
        row: usize,
        column: String,
        message: String,
    },

    /// A required conditioning stratum contains no observations.
    #[error("empty stratum: {0}")]
    EmptyStratum(String),

    /// The requested treatment arm has no fitted model.
    #[error("no fitted model for arm {0}")]
    ArmNotFitted(String),

    /// Feature matrix is rank deficient beyond what ridge jitter can absorb.
    #[error("degenerate design matrix: {0}")]
    DegenerateDesign(String),

    /// A ratio estimator's denominator is not positive.
    #[error("nonpositive denominator ({0:.3e})")]
    NonpositiveDenominator(f64),

    /// A sensitivity weight collapsed to zero.
    #[error("sensitivity weight omega_{arm} is numerically zero at x1 = {x1}")]
    ZeroOmega { arm: String, x1: f64 },

    /// Feature vector length does not match the policy stage dimension.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Dataset-level precondition failed (empty data, inconsistent dims, ...).
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn row_suffix(row: &Option<usize>) -> String {
    match row {
        Some(r) => format!(" (row {r})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn monotone(field: &'static str) -> Self {
        Error::MonotoneViolation { field, row: None }
    }

    /// Attach a data-row index to a monotone violation.
    pub(crate) fn with_row(self, row: usize) -> Self {
        match self {
            Error::MonotoneViolation { field, .. } => Error::MonotoneViolation {
                field,
                row: Some(row),
            },
            other => other,
        }
    }
}
