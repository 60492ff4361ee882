use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate growth factor |Dv| = {0:e}")]
    DegenerateGrowth(f64),
    #[error("frame degeneracy during reorthonormalization (pivot {0:e})")]
    FrameDegeneracy(f64),
    #[error("direction vector has zero length")]
    ZeroVector,
    #[error("expected bin count {expected} is below 5")]
    InsufficientSamples { expected: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown initial condition `{0}`")]
    UnknownSpec(String),
    #[error("non-positive value {value} at index {index} inside the fit window")]
    NonPositive { index: usize, value: f64 },
    #[error("initial magnetic field vanishes identically")]
    ZeroField,
    #[error("inadmissible contraction gap epsilon = {0}")]
    InadmissibleEpsilon(f64),
    #[error("points lie on (or within {0:e} of) the diagonal")]
    Diagonal(f64),
    #[error("plan replay missed its target (position error {position:e}, direction error {direction:e})")]
    ReplayTolerance { position: f64, direction: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
