use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("the torus flow has no vector field; use `torus_trajectory`")]
    TorusHasNoVectorField,

    #[error("trajectory blew up (non-finite state) at integration step {step}")]
    BlowUp { step: usize },

    #[error("requested {k_nn} neighbors but only {n} points are available")]
    TooManyNeighbors { k_nn: usize, n: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("kernel row {index} has zero sum (isolated point)")]
    ZeroRowSum { index: usize },

    #[error("kernel matrix is not symmetric (entry ({row}, {col}))")]
    NotSymmetric { row: usize, col: usize },

    #[error("query point {index} is too far from the training data (zero kernel row sum)")]
    FarQuery { index: usize },

    #[error("rank deficiency: eigenvalue {index} is {value:e} relative to the leading one")]
    RankDeficient { index: usize, value: f64 },

    #[error("truncated SVD did not converge: {converged} of {wanted} pairs after {iterations} Krylov vectors")]
    SvdNotConverged {
        wanted: usize,
        converged: usize,
        iterations: usize,
    },

    #[error("generator matrix is not skew-symmetric: residual {residual:e} exceeds {bound:e}")]
    NotSkew { residual: f64, bound: f64 },

    #[error("eigenvalue {index} is not positive ({value:e})")]
    NonPositiveEigenvalue { index: usize, value: f64 },

    #[error("observable has zero norm at lead index {index}")]
    ZeroNormTruth { index: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
