//! Deterministic randomness plumbing.
//!
//! Every stochastic stage draws from its own ChaCha stream whose seed is
//! derived from the experiment's root seed and a stage label, so partial
//! reruns and reordered stages reproduce bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer; decorrelates nearby seed/label pairs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a stage label.
fn hash_label(label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for a named stage under a root seed.
pub fn stage_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ splitmix64(hash_label(label)))
}

/// Deterministic generator for a named stage.
pub fn stage_rng(root: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stage_seed(root, label))
}
