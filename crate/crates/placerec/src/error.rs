//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input tensor has the wrong shape (channel count, non-square image, ...).
    #[error("input shape error: {0}")]
    InputShape(String),

    /// Two operands disagree on a dimension.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    /// Invalid model or training configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Synthetic-domain id outside `0..=5`.
    #[error("unknown domain id {0} (valid ids are 0..=5)")]
    DomainId(u8),

    /// Batch sampler cannot satisfy the batch spec.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Evaluation protocol does not match the available metadata.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Spatial map too small for the pooling chain.
    #[error("spatial size error: {0}")]
    SpatialSize(String),

    /// Malformed binary or text file.
    #[error("format error: {0}")]
    Format(String),

    /// Training aborted (e.g. non-finite loss); carries the batch seed for replay.
    #[error("training aborted: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
