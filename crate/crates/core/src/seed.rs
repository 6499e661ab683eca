//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! pure function of the run seed and a path of stream ids (stage, epoch,
//! batch, view). Resuming at any epoch therefore needs no saved RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `path` into `seed`.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_at(seed: u64, path: &[u64]) -> ChaCha8Rng {
    rng(derive(seed, path))
}

/// Stream ids.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const SHUFFLE: u64 = 10;
    pub const VIEW: u64 = 11;
    pub const AUG_VIEW: u64 = 12;
    pub const KMEANS: u64 = 20;
    pub const SPLIT: u64 = 30;
    pub const SYNTH: u64 = 40;
}
