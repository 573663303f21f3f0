//! Dense matrix arithmetic, decompositions and transformer kernels.

mod kernels;
mod lu;
mod matrix;
mod qr;
mod scalar;
mod spectrum;

pub use kernels::{
    gelu, gelu_backward, layernorm, layernorm_backward, softmax_rows, softmax_rows_backward,
    LayerNormCache, DEFAULT_LAYERNORM_EPS, GELU_CUBIC,
};
pub use lu::Lu;
pub use matrix::{matmul, matmul_nt, matmul_tn, Matrix};
pub use qr::qr_decompose;
pub use scalar::{Precision, Scalar};
pub use spectrum::{singular_extremes, singular_extremes_with, SingularExtremes, SpectrumConfig};
