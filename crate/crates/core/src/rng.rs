//! Deterministic random-stream plumbing.
//!
//! Every stochastic choice in the engine (class order, subsampling, weight
//! init, mini-batch shuffling, synthetic data) draws from a ChaCha stream
//! whose seed is derived from the experiment's master seed plus a purpose
//! tag. Derivation is a fixed integer hash, so streams are independent of
//! each other, stable across runs, and stable across platforms — the basis
//! for the bit-identical-rerun guarantee.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// splitmix64 finalizer; a well-mixed 64-bit permutation.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes, so distinct purposes get distinct streams.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent stream seed from a master seed, a purpose tag and
/// an index (phase number, epoch number, ...).
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    mix(master ^ mix(tag_hash(tag)) ^ mix(index.wrapping_mul(0x2545_f491_4f6c_dd1d)))
}

/// A ChaCha20 generator for the given seed. ChaCha output is specified
/// byte-for-byte, which keeps every downstream draw reproducible.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
