//! Dense matrix kernels, SVD, proximal operators and structural metrics.

mod matrix;
mod metrics;
mod prox;
mod svd;

pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use metrics::{density, effective_rank_ratio, frobenius_norm};
pub use prox::{soft_threshold, svt, svt_factored, SvtOutput};
pub(crate) use prox::shrink;
pub use svd::{svd, LowRank, SvdResult};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("SVD failed to converge on a {rows}x{cols} matrix")]
    SvdNoConvergence { rows: usize, cols: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
