//! Seeded, portable randomness. Everything random in the crate draws from
//! ChaCha8 so datasets and initializations are reproducible across
//! platforms.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child stream; used to give subsystems their own generators.
pub fn fork(rng: &mut Rng) -> Rng {
    ChaCha8Rng::seed_from_u64(rng.random::<u64>())
}

/// Uniform index in `0..n`, sampled through `u32` so the draw does not
/// depend on pointer width.
pub fn index(rng: &mut Rng, n: usize) -> usize {
    assert!(n > 0 && n <= u32::MAX as usize);
    rng.random_range(0..n as u32) as usize
}

pub fn unit(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform_tensor<T: Real>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of((2.0 * unit(rng) - 1.0) * bound))
}

pub fn normal_tensor<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(normal(rng) * std))
}

/// Fisher-Yates shuffle using [`index`].
pub fn shuffle<U>(rng: &mut Rng, items: &mut [U]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}
