use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation angle {angle} rad is within 1e-3 of pi; logarithm is ill-conditioned")]
    NearAngularSingularity { angle: f64 },
    #[error("dual-quaternion blend has no positive weight")]
    EmptyBlend,
    #[error("scaffold graph has no nodes")]
    EmptyScaffold,
    #[error("no tracks fall inside the dynamic regions")]
    NoTracks,
    #[error("backward pass requested without a cached forward pass")]
    MissingForwardCache,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("candidate mask is empty")]
    EmptyCandidate,
    #[error("mask is empty")]
    EmptyMask,
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("normal equations are singular after damping")]
    SingularSystem,
    #[error("need at least {needed} associated poses, got {got}")]
    InsufficientPoses { needed: usize, got: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
