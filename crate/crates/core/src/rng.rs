//! Deterministic seed derivation for per-cell and per-realization streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every stochastic step. ChaCha output is stable across
/// platforms and crate versions, which keeps artifacts byte-reproducible.
pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a global seed with a list of indices into a single 64-bit seed.
pub fn derive_seed(global: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(global), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Generator seeded from `derive_seed(global, parts)`.
pub fn stream(global: u64, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(global, parts))
}
