//! Splittable seed derivation.
//!
//! All randomness in the crate flows from a single master seed. Sub-tasks
//! (per-tree training, per-iteration balancing, per-subject generation)
//! receive seeds derived with [`derive_seed`], so results do not depend on
//! scheduling or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent child seed from `(seed, index)`.
///
/// The scheme is the SplitMix64 finalizer applied to
/// `seed XOR (index * 0x9E3779B97F4A7C15)` and is stable across platforms
/// and releases.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for a derived seed.
pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}
