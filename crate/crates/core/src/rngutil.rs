//! Deterministic rng stream derivation.
//!
//! Every stochastic component in the tuner draws from a `ChaCha8Rng` whose
//! seed is derived from the run seed plus structural indices (iteration,
//! candidate index, ...). Parallel and serial execution therefore produce
//! identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a list of stream labels into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x5d07_7a1e_u64;
    for &p in parts {
        acc = mix(acc ^ p);
    }
    acc
}

/// Independent rng stream for the given labels.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stable 64-bit hash of a string (FNV-1a), for deriving streams from digests.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
