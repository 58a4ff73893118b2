//! Covariance pooling with matrix power normalization and exact gradients
//! through the symmetric eigendecomposition.

pub mod backgrad;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod pool;
pub mod rng;
pub mod trainer;

pub use backgrad::{pool_backward, pool_backward_with, BackwardMethod, UpperSplit};
pub use error::{Error, Result};
pub use linalg::{sym_eig, EigenSystem, Matrix, Precision, Real, SymmetricMatrix};
pub use pool::{pool_forward, vectorize_upper, FirstOrderKind, NormalizationSpec, PoolingTape, Variant};
