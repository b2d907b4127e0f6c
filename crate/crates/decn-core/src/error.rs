//! Error type shared across the crate.

use std::fmt;

/// Errors surfaced by tensor, tape, and optimizer operations.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are inconsistent with the operation's contract.
    Shape(String),
    /// Convolution kernel is malformed (non-square, even side, ...).
    InvalidKernel(String),
    /// Kernel radius exceeds what mirror padding supports for this lattice.
    PaddingOverflow { kernel: usize, side: usize },
    /// A gradient was requested for a tensor that is not a leaf of the tape.
    UnknownLeaf,
    /// Operation requires an evaluated population grid.
    NotEvaluated,
    /// A NaN or infinity appeared where a finite value is required.
    NonFinite(String),
    /// Invalid configuration (bad preset, budget, bounds, ...).
    Config(String),
    /// Model file version does not match what this build understands.
    Version { found: u32, expected: u32 },
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::InvalidKernel(msg) => write!(f, "invalid kernel: {msg}"),
            Error::PaddingOverflow { kernel, side } => write!(
                f,
                "padding overflow: {kernel}x{kernel} kernel exceeds mirror padding limit for a {side}x{side} lattice (kernel side must be <= 2L-1)"
            ),
            Error::UnknownLeaf => write!(f, "parameter is not a leaf of this tape"),
            Error::NotEvaluated => write!(f, "population grid has stale fitness; call evaluate first"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Version { found, expected } => {
                write!(f, "unsupported model file version {found} (expected {expected})")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
