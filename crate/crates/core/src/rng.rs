//! Counter-based seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! pure function of the run seed and a sample counter, so sample `i` sees the
//! same randomness no matter which worker computes it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `mix64(base ^ index * GOLDEN_GAMMA)`.
pub fn split(base: u64, index: u64) -> u64 {
    mix64(base ^ index.wrapping_mul(GOLDEN_GAMMA))
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for sample `index` of a run seeded with `base`.
pub fn sample_stream(base: u64, index: u64) -> ChaCha8Rng {
    stream(split(base, index))
}
