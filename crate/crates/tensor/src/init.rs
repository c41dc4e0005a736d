//! Weight initializers.

use rand::Rng;

use crate::tensor::Tensor;

/// Glorot/Xavier uniform: `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

/// He/Kaiming uniform for ELU-like activations: `a = sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}
