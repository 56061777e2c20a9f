//! Seeded random streams. Every stochastic step in the crate draws from a
//! [`Rng`] derived from an explicit seed, so runs are reproducible.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, index)`, e.g. one stream per sample.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream keyed by several integers; used for per-(timestep, iteration) draws.
pub fn keyed(seed: u64, keys: &[u64]) -> Rng {
    // splitmix64 finalizer over the key sequence
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &k in keys {
        h ^= k.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    Rng::seed_from_u64(h)
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| normal(rng))
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard Gumbel draw, `-ln(-ln U)`.
pub fn gumbel(rng: &mut Rng) -> f64 {
    -(-open_unit(rng).ln()).ln()
}
