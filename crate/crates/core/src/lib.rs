//! Masked joint-embedding prediction with VICReg regularization.
//!
//! The numerical kernels (`linalg`, `vicreg`, `objective`, `dynamics`,
//! `diagnostics`) are generic over [`Scalar`]; the concrete aliases below fix
//! them to `f64`, which is what the network, trainer and command line use.

pub mod batch;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod network;
pub mod objective;
pub mod scalar;
pub mod trainer;
pub mod vicreg;

pub use batch::Embeddings;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type EmbeddingBatch = Embeddings<f64>;
pub type EmbeddingBatch32 = Embeddings<f32>;
pub type EigenDecomposition = linalg::EigenDecomposition<f64>;
