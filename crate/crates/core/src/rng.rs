//! Seed derivation helpers.
//!
//! Every stochastic choice in the artifact (weight init, episode synthesis,
//! token dropping, corruption noise) draws from a ChaCha8 stream seeded by a
//! value derived from the run seed and a purpose tag, so independent
//! subsystems never share or perturb each other's streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream-splitting: mixes a root seed with a tag and index.
///
/// SplitMix64 finalizer; the same (root, tag, index) triple always yields the
/// same seed on every platform.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h = root ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha8 generator for a derived stream.
pub fn stream(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, index))
}
