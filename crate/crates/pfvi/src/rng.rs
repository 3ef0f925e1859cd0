//! Deterministic RNG plumbing.
//!
//! All randomness in the crate flows from explicit `u64` seeds through
//! ChaCha20, so every run is bit-reproducible. Sub-streams (replicates,
//! grid cells, folds) derive their seeds from a master seed plus integer
//! tags via a SplitMix64 fold, which keeps them order-independent.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// One SplitMix64 step.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a sub-stream seed from a master seed and a list of integer tags.
///
/// Counter-based: `derive_seed(s, &[a, b])` differs from
/// `derive_seed(s, &[b, a])`, and collisions across distinct tag lists are
/// as unlikely as SplitMix64 allows.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(master ^ 0xA076_1D64_78BD_642F);
    for (i, &t) in tags.iter().enumerate() {
        state = splitmix64(state ^ splitmix64(t.wrapping_add(i as u64 + 1)));
    }
    state
}

/// Seeded ChaCha20 stream.
pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
