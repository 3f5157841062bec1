//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, tag)` so results
//! never depend on the order in which streams are created.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::tensor::Tensor;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the tag, mixed with the seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h))
}

pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * std;
    }
    t
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    t
}

pub fn gaussian(rng: &mut impl Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("std is finite and non-negative").sample(rng)
}
