//! Error taxonomy shared by every module.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped by
//! what the caller can do about them: shape and contract errors are programming
//! mistakes, domain and degenerate-geometry errors are data problems, parse and
//! checkpoint errors carry enough context to locate the bad bytes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation. Names the operation and
    /// both offending shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input is outside the mathematical domain of an operation
    /// (e.g. fewer than three correspondences for a rigid fit).
    #[error("domain error in {op}: {message}")]
    Domain { op: &'static str, message: String },

    /// An API contract was violated (backward called twice, leaf added after
    /// operations, gradients requested before backward, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid (zero sizes, negative tolerances, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Geometry too degenerate to proceed (rank-deficient covariance,
    /// coincident points where spread is required).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// Malformed input file. `offset` is the byte position of the first
    /// offending character.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Filesystem failure, annotated with the path involved. The underlying
    /// io error is the chained source, not repeated in the message.
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint file is malformed or does not match the network
    /// architecture it is being loaded into.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn domain(op: &'static str, message: impl Into<String>) -> Self {
        Error::Domain {
            op,
            message: message.into(),
        }
    }
}
