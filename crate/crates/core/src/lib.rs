//! Patch-based preconditioning for high-order finite element systems, with
//! compression of the local patch factorizations into a small database.

pub mod banded;
pub mod compress;
pub mod dense;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod krylov;
pub mod patch;
pub mod precond;
pub mod sparse;

pub use dense::{DenseFactor, DenseMatrix};
pub use error::{Error, Result};
pub use sparse::SparseMatrix;
