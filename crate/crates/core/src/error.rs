use thiserror::Error;

/// Errors produced by the volumetric nowcasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The jointly-valid cell set of a comparison is empty.
    #[error("no overlap between valid cells")]
    NoOverlap,

    #[error("optimization diverged at iteration {iteration} (non-finite loss)")]
    Diverged { iteration: usize },

    /// A binary file failed to decode; `field` names the header field or chunk.
    #[error("format error in `{field}`: {reason}")]
    Format { field: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch(msg.into()))
}
