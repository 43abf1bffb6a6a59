use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SobolError {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("degenerate base density: {0}")]
    DegenerateBase(String),

    #[error("ill-conditioned basis: diagonal ratio {ratio:.3e}")]
    IllConditioned { ratio: f64 },

    #[error("point {point:?} lies outside the domain")]
    DomainViolation { point: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid bandwidth {0}: must be positive and finite")]
    InvalidBandwidth(f64),

    #[error("bandwidth {h} too large: mirrored kernel support leaves the domain")]
    BandwidthTooLarge { h: f64 },

    #[error("insufficient sample: need at least {needed} rows, got {got}")]
    InsufficientSample { needed: usize, got: usize },

    #[error("density below floor at sample indices {indices:?}")]
    SingularDensity { indices: Vec<usize> },

    #[error("degenerate output: empirical variance of Y is {0}")]
    DegenerateOutput(f64),

    #[error("empty bandwidth window: 1/(2k) = {lower} >= 1/d = {upper}")]
    EmptyBandwidthWindow { lower: f64, upper: f64 },

    #[error("quadrature failed to converge: {0}")]
    Quadrature(String),

    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),

    #[error("sample size {n} exceeds brute-force guard {limit}")]
    GuardExceeded { n: usize, limit: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),
}

pub type Result<T> = std::result::Result<T, SobolError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> SobolError {
    SobolError::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
