use thiserror::Error;

/// Unified error type for the crate.
///
/// Variants are grouped by how the CLI maps them to exit codes:
/// configuration and validation problems exit with 1, numerical
/// divergence or failure to converge exits with 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Array dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A dense factorization failed to compute.
    #[error("linear algebra failure: {0}")]
    Linalg(String),

    /// An iterative routine ran out of its step budget.
    #[error("no convergence after {steps} steps: {what}")]
    NoConvergence { what: String, steps: usize },

    /// A state became non-finite during integration or training.
    #[error("divergence at step {step}: {what}")]
    Divergence { what: String, step: usize },

    /// Bad experiment configuration or CLI arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed data file (IDX, checkpoint, manifest).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NoConvergence { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
