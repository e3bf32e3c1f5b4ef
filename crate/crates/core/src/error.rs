use thiserror::Error;

use crate::grammar::ReportError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("parameter store must be frozen before personalization")]
    NotFrozen,
    #[error("no lesion visible in frame")]
    NoLesion,
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
