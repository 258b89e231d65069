use thiserror::Error;

/// Errors produced by the simulation kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Integer accumulation left the i32 range. Quantized paths must fail
    /// loudly rather than wrap.
    #[error("i32 accumulator overflow: {0}")]
    Overflow(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
