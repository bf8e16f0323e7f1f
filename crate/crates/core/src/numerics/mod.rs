//! Dense tensors, reverse-mode differentiation, seeded randomness and AdamW.

mod adamw;
mod rng;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use rng::{rng_gaussian, DeterministicRng, RNG_ALGORITHM};
pub use tape::{forward, Activation, Gradients, NodeId, Primitive, Tape};
pub use tensor::TensorBuffer;

pub(crate) use tensor::matmul_into;

/// Relative error used by gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
