//! Crate-wide error type.

use crate::network::TrainingTrace;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/layer shape disagreement; names both shapes.
    #[error("{context}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    /// An argument outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A gradient accessor was called before any forward pass.
    #[error("{0} requires a cached forward pass; call forward first")]
    NoForwardCache(&'static str),

    /// Training loss left the finite range.
    #[error("training diverged at iteration {iteration} (loss not finite)")]
    Diverged {
        iteration: usize,
        trace: Box<TrainingTrace>,
    },

    /// A file did not match its expected on-disk format.
    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
