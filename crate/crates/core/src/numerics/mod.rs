//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod conv;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use conv::{conv2d_reference, conv_transpose2d_reference};
pub use gradcheck::{grad_check, grad_check_many, CoordinateCheck, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{conv2d_output_shape, conv_transpose_output_len, Real, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
}

/// Sinusoidal position table of shape `[positions.len(), dim]`.
pub fn sinusoidal_positions<F: Real>(positions: &[usize], dim: usize) -> Tensor<F> {
    let mut out = Tensor::zeros(&[positions.len(), dim]);
    let data = out.data_mut();
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..dim / 2 {
            let freq = (-(2.0 * i as f64) / dim as f64 * 10000f64.ln()).exp();
            let angle = pos as f64 * freq;
            data[r * dim + 2 * i] = F::c(angle.sin());
            data[r * dim + 2 * i + 1] = F::c(angle.cos());
        }
        if dim % 2 == 1 {
            data[r * dim + dim - 1] = F::c((pos as f64).sin());
        }
    }
    out
}
