//! Seeded random number generation.
//!
//! Every random decision in the harness goes through a `ChaCha8Rng` built from a 64-bit
//! seed. Independent streams are derived from a parent seed with [`derive_seed`], so
//! adding a new consumer never perturbs the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer. A bijection on `u64`.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of an independent stream identified by `stream` from `parent`.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    mix64(mix64(parent) ^ stream.rotate_left(17))
}

/// Seeded stream derived from `(parent, stream)`.
pub fn stream(parent: u64, stream: u64) -> Rng {
    seeded(derive_seed(parent, stream))
}
