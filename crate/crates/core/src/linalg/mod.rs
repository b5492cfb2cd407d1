//! Dense matrices, symmetric eigendecomposition and batch statistics.

mod eigen;
mod matrix;
mod stats;
mod svd;

pub use eigen::{symmetric_eigendecompose, EigenDecomposition, MAX_EIGEN_DIM, MAX_SWEEPS};
pub use matrix::DenseMatrix;
pub use stats::{batch_covariance, batch_variance, effective_rank};
pub use svd::singular_values;
