use thiserror::Error;

/// Unified error type for the codec library.
///
/// Variants are grouped by the layer that raises them so the CLI can map
/// them onto stable exit codes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stride mismatch: {0}")]
    Stride(String),

    #[error("invalid coordinates: {0}")]
    Coords(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("entropy coding: {0}")]
    Entropy(String),

    #[error("malformed bitstream: {0}")]
    Bitstream(String),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
