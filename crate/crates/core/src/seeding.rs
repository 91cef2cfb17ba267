//! Deterministic sub-seed derivation.
//!
//! Every source of randomness in the pipeline (corpus generation, data
//! order, DP noise, schedule draws, attack sampling) pulls from its own
//! ChaCha8 stream whose seed is derived from the master seed plus a string
//! tag and an index. Streams never alias unless the (tag, index) pair
//! collides, so stages can run in any order without perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, tag, index)`.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(master);
    for &b in tag.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index)
}

/// A ChaCha8 generator seeded from a derived child seed.
pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}
