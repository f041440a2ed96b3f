//! Dense double-precision linear algebra.

mod matrix;
mod svd;

pub use matrix::{column_norms, frobenius_norm, matmul, Matrix};
pub use svd::{numerical_rank, pinv, svd, SvdFactors, MAX_SWEEPS, PINV_RTOL};
