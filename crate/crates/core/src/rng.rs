//! Seedable random number generation.
//!
//! Every stochastic component takes an explicit seed. Independent streams
//! are derived from a root seed with [`derive_seed`] so that adding a new
//! consumer never perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Mixes a named stream into a root seed (splitmix64 finalizer).
pub fn derive_seed(root: u64, stream: &str) -> u64 {
    let mut h = root ^ 0x9E37_79B9_7F4A_7C15;
    for b in stream.bytes() {
        h = h.wrapping_add(b as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}
