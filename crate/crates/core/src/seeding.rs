//! Seed derivation and hashing. Every random stream in the project is a
//! ChaCha8 generator seeded through `mix`, so any (master seed, purpose,
//! index...) tuple names one reproducible stream and streams never alias
//! unless their tuples match.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step: the standard finalizing mix.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Fold a tuple of words into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x243F6A8885A308D3u64; // arbitrary nonzero start
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

pub fn sub_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// FNV-1a over bytes; used to fingerprint configs in checkpoints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF29CE484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}
