use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("asymmetric tensor: {0}")]
    AsymmetricTensor(String),

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("unsupported variant {0} for this operation")]
    UnsupportedVariant(crate::tensor::ModelVariant),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("eigen-iteration stagnated after {iterations} iterations (Rayleigh quotient {rayleigh:.6e})")]
    EigenStagnation { iterations: usize, rayleigh: f64 },

    #[error("time step {dt:.6e} exceeds the estimated stability bound {bound:.6e}")]
    UnstableStep { dt: f64, bound: f64 },

    #[error("symbol not PSD: eigenvalue {0:.6e}")]
    SymbolNotPsd(f64),

    #[error("problem too large for dense evaluation: {dofs} dofs (limit {limit})")]
    TooLarge { dofs: usize, limit: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Validation problems (bad input) as opposed to numerical failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidGrid(_)
                | Error::SizeMismatch { .. }
                | Error::AsymmetricTensor(_)
                | Error::InvalidMaterial(_)
                | Error::UnsupportedVariant(_)
                | Error::InvalidArgument(_)
                | Error::Config(_)
        )
    }
}
