//! Dense tensors, the handful of linear-algebra kernels the toolkit needs,
//! and the seeded generator. Everything is `f64` with left-to-right
//! reductions so results are bit-reproducible.

mod linalg;
mod rng;
mod tensor;

pub use linalg::{
    dot, lu_solve, matmul, matmul_nt, matmul_tn, solve_least_squares, top_k_indices,
    truncated_svd, TruncatedSvd,
};
pub use rng::Rng;
pub use tensor::{mse, Tensor};
