use thiserror::Error;

use crate::grid::netpbm::ImageError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("kernel size {0} is even; only odd kernels are supported")]
    EvenKernel(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("k = {k} exceeds the number of candidate patches ({count})")]
    KTooLarge { k: usize, count: usize },

    #[error("match index {index} out of range for {count} source patches")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("no valid ground-truth pixels")]
    EmptyValidSet,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("loss is not finite at step {step}")]
    Divergence { step: usize },

    #[error(transparent)]
    Image(#[from] ImageError),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Display, found: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
