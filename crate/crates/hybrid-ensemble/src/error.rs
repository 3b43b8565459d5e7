use thiserror::Error;

pub type Result<T> = std::result::Result<T, HybridError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HybridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("field shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("spectral derivative requested on non-periodic {axis} axis")]
    SpectralNonPeriodic { axis: &'static str },

    #[error("operation needs a continuous quantum sector, found a discrete one")]
    DiscreteQuantumSector,

    #[error("negative density {value:e} at cell {index:?}")]
    NegativeDensity { value: f64, index: (usize, usize) },

    #[error("ensemble has zero total probability")]
    ZeroMass,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("operator `{label}` is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { label: String, deviation: f64 },

    #[error("functional `{0}` exposes no variational derivatives and numerical fallback is disabled")]
    MissingDerivatives(String),

    #[error("resource guard: {cells} cells exceeds limit {limit}")]
    ResourceGuard { cells: usize, limit: usize },

    #[error("time step {dt:e} exceeds stability bound {dt_max:e}")]
    StabilityBound { dt: f64, dt_max: f64 },

    #[error("NaN encountered at step {step}")]
    NanDuringEvolution { step: usize },

    #[error("packet reached the boundary (edge probability {edge_probability:e})")]
    BoundaryReached { edge_probability: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("width {sigma} is below the resolvable limit {min}")]
    Unresolvable { sigma: f64, min: f64 },

    #[error("ambiguous pointer reading: {0}")]
    AmbiguousReading(String),

    #[error("shift {shift} exceeds half the box {half_box}")]
    WrapAround { shift: f64, half_box: f64 },

    #[error("non-integrable weight: {0}")]
    NonIntegrableWeight(String),

    #[error("trajectory escaped bounds at t={t} (x={x}, k={k})")]
    TrajectoryEscape { t: f64, x: f64, k: f64 },

    #[error("state not representable: {0}")]
    NotRepresentable(String),

    #[error("serialization: {0}")]
    Serialization(String),
}
