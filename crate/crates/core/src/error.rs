use thiserror::Error;

#[derive(Debug, Error)]
pub enum MampcError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("unknown plant `{0}`")]
    UnknownPlant(String),
    #[error("box lower bound exceeds upper bound at index {0}")]
    InvalidBox(usize),
    #[error("QP Hessian is not positive semidefinite")]
    IndefiniteHessian,
    #[error("QP Hessian is identically zero")]
    ZeroHessian,
    #[error("QP solver reached its iteration cap ({0})")]
    QpMaxIters(usize),
    #[error("Riccati iteration failed: {0}")]
    Dare(String),
    #[error("closed loop is not stable (spectral radius {0})")]
    Unstable(f64),
    #[error("dataset generation: {0}")]
    Dataset(String),
    #[error("policy blob: {0}")]
    Blob(String),
    #[error("training: {0}")]
    Training(String),
    #[error("MPC problem infeasible at the current state")]
    Infeasible,
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, MampcError>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(MampcError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
