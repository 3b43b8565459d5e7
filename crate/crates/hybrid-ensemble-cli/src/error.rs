use hybrid_ensemble::HybridError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error(transparent)]
    Library(#[from] HybridError),
}

impl CliError {
    /// 2 for anything the caller can fix by changing the input, 1 for failed runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Library(e) => match e {
                HybridError::InvalidGrid(_)
                | HybridError::InvalidParameter(_)
                | HybridError::StabilityBound { .. }
                | HybridError::Unresolvable { .. }
                | HybridError::WrapAround { .. }
                | HybridError::DimensionMismatch { .. }
                | HybridError::ResourceGuard { .. }
                | HybridError::NotHermitian { .. }
                | HybridError::AmbiguousReading(_)
                | HybridError::DiscreteQuantumSector
                | HybridError::SpectralNonPeriodic { .. } => 2,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
