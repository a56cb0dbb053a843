use alloc::string::String;
use core::fmt;

/// Errors surfaced by tensor operations, model construction and evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// An operation received tensors with incompatible extents.
    Shape { op: &'static str, detail: String },
    /// A configuration value is invalid for the requested operation.
    Config(String),
    /// Masked pooling over an all-zero mask.
    DegenerateMask,
    /// Cosine similarity of a zero vector.
    DegenerateVector,
    /// A computation produced or received non-finite values.
    Eval(String),
    /// Ground truth failed validation (e.g. non-binary mask).
    Validation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::DegenerateMask => write!(f, "degenerate mask: sum of mask weights is zero"),
            Error::DegenerateVector => write!(f, "degenerate vector: zero norm"),
            Error::Eval(msg) => write!(f, "evaluation error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
