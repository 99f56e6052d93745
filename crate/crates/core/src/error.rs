//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed UFOA / UFOM / vclip bytes.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    /// Adapter set and model are not of the same specification.
    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("condition error: {0}")]
    Condition(String),

    /// Non-finite or non-positive quantity where the math requires otherwise.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("metric error: {0}")]
    Metric(String),

    /// The function handed to the finite-difference oracle is not deterministic.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// A frozen base parameter changed during adapter training.
    #[error("freeze guard violated: layer `{layer}` changed at step {step}")]
    FreezeViolation { layer: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
