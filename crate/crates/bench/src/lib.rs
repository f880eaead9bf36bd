//! Fixtures shared by the benchmarks.

use odformer_core::Tensor;

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn filled(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
    .expect("valid shape")
}
