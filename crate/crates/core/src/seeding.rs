//! Deterministic seed derivation.
//!
//! Every randomized stage of the pipeline draws from its own `ChaCha8Rng`
//! seeded by mixing the global seed with structural coordinates (epoch, patch
//! id, view index, transform counter). Results are therefore independent of
//! execution order and worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-avalanche 64-bit mixer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a child seed from a base seed and a tag.
pub fn subseed(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1))
}

/// Seed for one augmented view: hash(global_seed, epoch, patch_id, view_index).
pub fn view_seed(global_seed: u64, epoch: u64, patch_id: u64, view_index: u64) -> u64 {
    subseed(subseed(subseed(global_seed, epoch), patch_id), view_index)
}

/// RNG for a fixed (seed, counter) slot.
pub fn rng_at(seed: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(seed, counter))
}

/// Stable tag for a named pipeline stage.
pub fn tag(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
