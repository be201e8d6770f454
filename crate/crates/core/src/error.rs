use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the numeric core, model I/O, and the simulators.
#[derive(Debug)]
pub enum Error {
    /// Input values were non-finite or otherwise outside the operation's domain.
    InvalidInput(String),
    /// A configuration is internally inconsistent (bad bit-widths, non-divisor
    /// unit counts, mismatched dimensions, ...).
    Config(String),
    /// Tensor shapes do not line up for the requested operation.
    ShapeMismatch { expected: String, actual: String },
    /// The segment fitter could not meet the error bound within the segment cap.
    FitFailure {
        requested: f64,
        achieved: f64,
        segments: usize,
    },
    /// The SSM hidden state exceeded its declared bit-width. This signals
    /// mis-calibrated scales rather than a recoverable condition.
    StateOverflow { step: usize, value: i64, bits: u32 },
    /// A container or JSON document could not be decoded. The message names
    /// the offending tensor or field where one is known.
    Parse(String),
    /// A sweep point is missing a value required by the requested objectives.
    MissingObjective(String),
    /// Metrics entries that matched no swept configuration.
    UnmatchedMetrics(Vec<String>),
    Io(io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::ShapeMismatch { expected, actual } => {
                write!(f, "shape mismatch: expected {expected}, got {actual}")
            }
            Error::FitFailure {
                requested,
                achieved,
                segments,
            } => write!(
                f,
                "piecewise fit failed: requested error bound {requested}, \
                 achieved {achieved} with {segments} segments"
            ),
            Error::StateOverflow { step, value, bits } => write!(
                f,
                "SSM state overflow at step {step}: |{value}| exceeds {bits}-bit range \
                 (scales are mis-calibrated)"
            ),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::MissingObjective(msg) => write!(f, "missing objective value: {msg}"),
            Error::UnmatchedMetrics(keys) => {
                write!(f, "metrics file entries match no swept point: {}", keys.join(", "))
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

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
