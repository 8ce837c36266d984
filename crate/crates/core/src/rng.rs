//! Deterministic random substreams.
//!
//! Every random draw in the engine comes from a `ChaCha8Rng` seeded by mixing a
//! run seed with a small tuple of labels (purpose, step, prompt, rollout index).
//! Streams for different tuples are independent, so rollouts can be generated
//! in any order and still be bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of splitmix64 finalization.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(seed), |acc, &l| mix64(acc ^ mix64(l.wrapping_add(GOLDEN))))
}

pub fn substream(seed: u64, labels: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

// Purpose tags keep adaptation, evaluation and generation streams disjoint.
pub const TAG_ROLLOUT: u64 = 1;
pub const TAG_EVAL: u64 = 2;
pub const TAG_BATCH: u64 = 3;
pub const TAG_RANDOM_REWARD: u64 = 4;
pub const TAG_TASK: u64 = 5;
