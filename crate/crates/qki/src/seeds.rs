//! Seed derivation for deterministic, parallel-safe randomness.
//!
//! Every random draw in the workspace comes from a ChaCha stream whose seed
//! is a pure function of (master seed, stream label, item index). Work can
//! then be split across any number of threads without changing results,
//! because no generator is ever shared between items.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels; keep values distinct across the workspace.
pub mod stream {
    pub const KEYS: u64 = 1;
    pub const CENTERS: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const EVAL_SPLIT: u64 = 4;
    pub const DISTRACTORS: u64 = 5;
    pub const MODEL_INIT: u64 = 6;
    pub const BATCH_ORDER: u64 = 7;
    pub const FEATURIZER: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix (master, stream, index) into a single 64-bit seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

/// Fresh generator for one (stream, item) pair.
pub fn item_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
