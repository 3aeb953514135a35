use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation vector norm {norm} is outside the canonical chart |r| < pi")]
    NonCanonicalRotation { norm: f64 },
    #[error("rotation angle {angle} is within 1e-6 of pi; axis is ill-conditioned")]
    NearPiRotation { angle: f64 },
    #[error("point depth {depth} is not in front of the camera")]
    BehindCamera { depth: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid {what}: {reason}")]
    InvalidArgument { what: &'static str, reason: String },
    #[error("invalid crop: {0}")]
    InvalidCrop(String),
    #[error("no crop within the resize bound reaches the requested field of view: {0}")]
    Infeasible(String),
    #[error("mask has no valid pixel")]
    EmptyMask,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),
    #[error("trajectory too short: path length {length} < required {required}")]
    TrajectoryTooShort { length: f64, required: f64 },
    #[error("trajectory length mismatch: {0}")]
    Mismatch(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        what,
        reason: reason.into(),
    }
}
