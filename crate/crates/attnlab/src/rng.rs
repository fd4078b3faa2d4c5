//! Deterministic seeded RNG substreams.
//!
//! All randomness in the crate flows from one global seed through named
//! substreams, so each component (training, per-image patch init, per-cell
//! controlled trials) is individually reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a substream seed from (base seed, tag, index).
pub fn substream_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut state = base;
    let mut acc = splitmix64(&mut state);
    for &byte in tag.as_bytes() {
        state ^= u64::from(byte);
        acc ^= splitmix64(&mut state);
    }
    state ^= index;
    acc ^ splitmix64(&mut state)
}

/// Deterministic RNG for a named substream of the global seed.
pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(base, tag, index))
}
