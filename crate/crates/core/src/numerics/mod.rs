//! Dense tensors, seeded randomness, and the forward/backward kernels.

pub mod io;
pub mod kernels;
mod rng;
mod tensor;

pub use kernels::{
    add_row_bias, bias_backward, gelu, gelu_backward, layernorm, layernorm_backward, matmul,
    matmul_backward, matmul_nt, matmul_tn, softmax_backward, softmax_rows, LayerNormCache,
    LAYERNORM_EPS,
};
pub use rng::{mix_seed, Rng};
pub use tensor::{Real, Tensor};
