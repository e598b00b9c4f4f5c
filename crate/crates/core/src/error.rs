use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by binary container readers.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?} (expected {expected:?})")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {container} version {version}")]
    UnsupportedVersion { container: &'static str, version: u16 },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("dimensions {dims:?} overflow the addressable payload size")]
    DimensionOverflow { dims: Vec<u64> },
    #[error("malformed {container}: {reason}")]
    Malformed { container: &'static str, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("offset {index} ({dx}, {dy}) places the window outside the master field")]
    OffsetOutOfBounds { index: usize, dx: usize, dy: usize },
    #[error("sample rate {sample_rate_hz} Hz is not an integer multiple of the cycle frequency {cycle_hz} Hz")]
    NonIntegerSamplesPerCycle { sample_rate_hz: f64, cycle_hz: f64 },
    #[error("expected count {0} exceeds the exact integer range of the count representation")]
    CountOverflow(f64),
    #[error("inconsistent record shapes: {0}")]
    InconsistentRecords(String),
    #[error("missing realization {0}")]
    MissingRealization(usize),
    #[error("frame index {index} out of range (0..{frames})")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("undefined SNR: region of interest has zero standard deviation")]
    UndefinedSnr,
    #[error("no edge found in the profile")]
    NoEdge,
    #[error("operation requires a chopper scene")]
    NotChopper,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
