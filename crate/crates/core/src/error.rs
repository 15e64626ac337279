use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AvemError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Every latent path has zero likelihood under the current parameters.
    #[error("degenerate likelihood: all forward mass is -inf")]
    DegenerateLikelihood,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("transition matrix is reducible")]
    Reducible,

    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error("unsupported emission model: {0}")]
    UnsupportedEmission(String),

    /// Posterior mass falls outside the node set for a subject.
    #[error("all posterior weights vanished for subject {subject}; {hint}")]
    EmptyPosterior { subject: usize, hint: &'static str },
}

pub type Result<T, E = AvemError> = std::result::Result<T, E>;
