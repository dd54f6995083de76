//! Dense real-matrix kernels: SVD, symmetric eigendecomposition,
//! pseudo-inverse, softmax and KL divergence. Everything runs in `f64`.

mod decomp;
mod matrix;
mod prob;

pub use decomp::{pinv, svd, svd_psd, sym_eig, SvdResult, SymEig};
pub use matrix::{dot, norm2, Matrix};
pub use prob::{kl_divergence, softmax_rows, KL_FLOOR};
