//! Seed derivation and deterministic sampling helpers.
//!
//! All randomness in the crate flows through `ChaCha8Rng` seeded from a u64.
//! Sub-streams (per sample, per epoch, per draw) are derived by hashing the
//! base seed with a textual tag and an index, so adding a consumer never
//! shifts the draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

/// FNV-1a over the base seed, a tag, and an index. Stable across platforms.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for byte in base
        .to_le_bytes()
        .iter()
        .chain(tag.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= *byte as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor. Draws are taken in f64 and narrowed, so an f32 run
/// sees the rounded version of the exact same stream an f64 run sees.
pub fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product mismatch is impossible here")
}

/// Uniform tensor on [lo, hi).
pub fn uniform_tensor<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product mismatch is impossible here")
}
