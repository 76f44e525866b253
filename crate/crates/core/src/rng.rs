//! Deterministic random streams.
//!
//! Each (seed, purpose, epoch, step) tuple maps to its own generator, so two
//! code paths that visit the same step draw identical noise regardless of
//! how many draws happened elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StepRng = ChaCha8Rng;

/// Purpose tags keep independent streams apart.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const DATA: u64 = 4;
    pub const WARMUP: u64 = 5;
    pub const STATIC: u64 = 6;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> StepRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
