//! Deterministic seed derivation.
//!
//! Every random draw in the artifact comes from a named substream of the
//! single run seed, so reruns are bit-identical and adding a consumer never
//! perturbs existing streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates structured inputs.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, used for stream names and file checksums.
#[inline]
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives a substream seed from the run seed, a stream name, and integer
/// parts (layer index, pair index, epoch, ...).
pub fn substream(seed: u64, name: &str, parts: &[u64]) -> u64 {
    let mut acc = mix64(seed ^ fnv1a(name.as_bytes()));
    for &p in parts {
        acc = mix64(acc ^ mix64(p));
    }
    acc
}

/// Seeded RNG for a named substream.
pub fn rng(seed: u64, name: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(seed, name, parts))
}
