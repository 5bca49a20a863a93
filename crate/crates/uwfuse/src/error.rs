//! Crate-wide error type and result alias.

use std::fmt;
use std::path::PathBuf;

/// Errors raised by validation, numerics, and file handling.
#[derive(Debug)]
pub enum Error {
    /// A value that must be finite was NaN or infinite; `index` is the flat
    /// offset into the offending container.
    NonFiniteValue { what: &'static str, index: usize },
    /// Two containers that must agree in shape did not.
    ShapeMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },
    /// A variance or scale parameter was zero or negative.
    NonPositiveVariance { value: f64 },
    /// A configuration value was outside its legal range.
    InvalidConfig { what: String },
    /// Metric input was missing one of the two label classes.
    DegenerateLabels { what: &'static str },
    /// Every (batch, time) slice was a zero vector, so no cosine is defined.
    DegenerateVector,
    /// An operation received an empty container.
    EmptyInput { what: &'static str },
    /// Event synthesis needs at least two frames.
    TooFewFrames { frames: usize },
    /// A mask or lookup index exceeded the container length.
    IndexOutOfRange { index: usize, len: usize },
    /// Training loss became non-finite at the given step.
    Divergence { step: usize },
    /// Malformed file payload (EMB1, FRM1, CSV, or JSON).
    Format { what: String },
    /// Underlying I/O failure, with the path that triggered it.
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>) -> Self {
        Error::Format { what: what.into() }
    }

    pub fn invalid_config(what: impl Into<String>) -> Self {
        Error::InvalidConfig { what: what.into() }
    }

    /// Process exit code for the CLI: 2 for validation errors, 3 for
    /// degenerate-data errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteValue { .. }
            | Error::ShapeMismatch { .. }
            | Error::NonPositiveVariance { .. }
            | Error::InvalidConfig { .. }
            | Error::EmptyInput { .. }
            | Error::TooFewFrames { .. }
            | Error::IndexOutOfRange { .. }
            | Error::Format { .. } => 2,
            Error::DegenerateLabels { .. } | Error::DegenerateVector => 3,
            Error::Divergence { .. } | Error::Io { .. } => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFiniteValue { what, index } => {
                write!(f, "non-finite value in {what} at flat index {index}")
            }
            Error::ShapeMismatch {
                what,
                expected,
                actual,
            } => write!(f, "shape mismatch in {what}: expected {expected}, got {actual}"),
            Error::NonPositiveVariance { value } => {
                write!(f, "variance must be positive, got {value}")
            }
            Error::InvalidConfig { what } => write!(f, "invalid configuration: {what}"),
            Error::DegenerateLabels { what } => {
                write!(f, "degenerate labels for {what}: need both classes")
            }
            Error::DegenerateVector => {
                write!(f, "all slices are zero vectors; alignment loss undefined")
            }
            Error::EmptyInput { what } => write!(f, "empty input: {what}"),
            Error::TooFewFrames { frames } => {
                write!(f, "need at least 2 frames for event synthesis, got {frames}")
            }
            Error::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            Error::Divergence { step } => {
                write!(f, "training loss became non-finite at step {step}")
            }
            Error::Format { what } => write!(f, "malformed input: {what}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
