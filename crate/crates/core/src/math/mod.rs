//! Numeric substrate: tensors, reverse-mode tape, seeded randomness, Adam and
//! checkpoint files.

pub mod adam;
pub mod checkpoint;
pub mod gumbel;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{clip_grad_norm, AdamState};
pub use gumbel::{gumbel_noise, gumbel_softmax_st, FrozenAssignment, StSample};
pub use rng::Rng;
pub use tape::{softmax_rows, Gradients, Segments, Tape, Var};
pub use tensor::{argmax, matmul, Tensor};

/// Glorot/Xavier uniform init for a `fan_in × fan_out` matrix.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in, fan_out, bound)
}

/// Entries uniform in `[-bound, bound)`.
pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}
