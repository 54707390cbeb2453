//! Error types shared across the crate.

use alloc::boxed::Box;

use crate::geometry::SimilarityTransform;

pub type Result<T> = core::result::Result<T, Error>;

/// Partial state carried by [`Error::SolverFailure`]: the best iterate the
/// rotation solver reached before giving up.
#[derive(Debug, Clone)]
pub struct SolverFailure {
    pub best: SimilarityTransform,
    pub iterations: usize,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("covariance is singular after regularization")]
    SingularCovariance,

    #[error("degenerate point configuration (fewer than 3 points, or rank-deficient)")]
    DegenerateConfiguration,

    #[error("rotation solver failed to converge after {} iterations", .0.iterations)]
    SolverFailure(Box<SolverFailure>),

    #[error("degenerate triangle")]
    DegenerateTriangle,

    #[error("empty projection: no rasterizable triangle")]
    EmptyProjection,

    #[error("model has no expression part")]
    MissingExpressionPart,

    #[error("embedding system is singular (eta = 0 with rank-deficient modes)")]
    SingularEmbeddingSystem,

    #[error("correlation undefined: region has zero variance")]
    ZeroVariance,

    #[error("no admissible shift in the search window")]
    NoAdmissibleShift,

    #[error("degenerate scale: landmark sets do not define a scale factor")]
    DegenerateScale,

    #[error("landmark set does not follow the 68-point convention (got {got} points)")]
    LandmarkConvention { got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}
