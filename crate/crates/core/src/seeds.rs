//! Deterministic derivation of per-work-item RNG streams.
//!
//! Every randomized stage draws from a generator derived from the run seed, a
//! fixed role tag and the indices identifying the work item (document id,
//! sweep number).  The derivation is a pure function of those values, so
//! results never depend on thread count, scheduling or iteration
//! interleaving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 1;
pub const TAG_SWEEP: u64 = 2;
pub const TAG_PICK: u64 = 3;
pub const TAG_PREDICT: u64 = 4;
pub const TAG_SYNTH: u64 = 5;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

// splitmix64 finalizer; stable across platforms and releases.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut h = mix(seed ^ GOLDEN);
    h = mix(h ^ tag.wrapping_mul(GOLDEN));
    h = mix(h ^ a.wrapping_mul(GOLDEN));
    mix(h ^ b.wrapping_mul(GOLDEN))
}

pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, a, b))
}
