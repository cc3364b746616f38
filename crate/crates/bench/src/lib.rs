//! Shared helpers for the criterion benchmarks.

use rungrad::{DType, Tensor};

/// Deterministic pseudo-random tensor without pulling in an RNG crate.
pub fn lcg_tensor(shape: impl Into<rungrad::Shape>, seed: u64) -> Tensor {
    let shape = shape.into();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let vals: Vec<f64> = (0..shape.len())
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape, vals).expect("sized values")
}

pub fn lcg_tensor_f32(shape: impl Into<rungrad::Shape>, seed: u64) -> Tensor {
    lcg_tensor(shape, seed).cast(DType::F32)
}
