//! Crate-wide error type. Validation failures and I/O failures are kept
//! distinct because the CLI maps them to different exit codes.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DriftError {
    /// A caller-supplied argument is malformed (shape mismatch, bad range,
    /// missing input a toggle requires, unknown config key, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Field shapes that must agree do not.
    #[error("shape mismatch: {context}: {expected} vs {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A masked reduction was asked to average over zero pixels.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// A point required in front of the camera has z <= epsilon_z.
    #[error("behind camera: {0}")]
    BehindCamera(String),

    /// The optimizer produced a non-finite objective or gradient.
    #[error("divergence at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    /// A file did not conform to its on-disk format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl DriftError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DriftError::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        DriftError::Format(msg.into())
    }

    /// Process exit status for the CLI: validation-type failures exit 1,
    /// I/O and format failures exit 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            DriftError::Io(_) | DriftError::Format(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, DriftError>;
