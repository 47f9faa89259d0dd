//! Seed streams.
//!
//! Every stochastic field in the crate is drawn from a ChaCha8 generator whose
//! seed is derived from a parent seed and a stream tag, so independent
//! components never share random state and results do not depend on platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `base ^ stream`.
pub fn derive(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream keyed by a string (e.g. a canonical label), stable across runs.
pub fn derive_str(base: u64, key: &str) -> u64 {
    key.bytes().fold(derive(base, 0x5EED), |acc, b| derive(acc, b as u64))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
