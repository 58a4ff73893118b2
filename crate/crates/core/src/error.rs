use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is not symmetric: asymmetry {asymmetry:e} exceeds tolerance {tolerance:e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("spectral function produced a non-finite value at eigenvalue {eigenvalue:e} (index {index})")]
    SpectralNonFinite { index: usize, eigenvalue: f64 },

    #[error("{variant} normalization requires {requirement}; offending eigenvalue {eigenvalue:e} (index {index})")]
    Precondition {
        variant: &'static str,
        requirement: &'static str,
        index: usize,
        eigenvalue: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("variant {0} is not handled by this backward routine")]
    UnsupportedVariant(&'static str),

    #[error("finite difference produced a non-finite value when perturbing ({row}, {col})")]
    FiniteDifference { row: usize, col: usize },

    #[error("matrix is singular or not positive definite: eigenvalue {eigenvalue:e} at index {index}")]
    NotPositiveDefinite { index: usize, eigenvalue: f64 },

    #[error("minimization did not converge (residual {residual:e})")]
    Minimization { residual: f64 },

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: String },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("tensor file error at byte offset {offset}: {message}")]
    TensorFile { offset: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Checkpoint(e.to_string())
    }
}
