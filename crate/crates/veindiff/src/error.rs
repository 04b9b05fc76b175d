use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum VeinError {
    /// Bad user-supplied configuration (dimensions, ranges, missing keys...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A documented invariant was violated at runtime (shape mismatch,
    /// value out of range, inconsistent manifest, ...).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Dataset content problems tied to a concrete path.
    #[error("dataset error at {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    /// Reverse-diffusion produced a non-finite value.
    #[error("sampling diverged at step t={step}: non-finite denoiser output")]
    Sampling { step: usize },

    /// Checkpoint serialization/deserialization problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, VeinError>;

impl VeinError {
    pub fn config(msg: impl Into<String>) -> Self {
        VeinError::Config(msg.into())
    }
    pub fn invariant(msg: impl Into<String>) -> Self {
        VeinError::Invariant(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        VeinError::Checkpoint(msg.into())
    }
}
