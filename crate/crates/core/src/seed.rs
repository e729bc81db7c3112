//! Seed handling.
//!
//! A run has one global seed. Every consumer draws its own stream from
//! `derive_seed(global, stream, counter)`, where `stream` is a fixed constant
//! per component (see [`streams`]) and `counter` indexes repetitions inside
//! that component (seed replicate, target index, ...). The derivation is a
//! SplitMix64 finalizer over the three words, so streams never depend on
//! which other components are present in a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type BenchRng = ChaCha8Rng;

pub mod streams {
    pub const DATASET: u64 = 1;
    pub const TEST_TARGETS: u64 = 2;
    pub const SURROGATE_TEST: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const INN: u64 = 10;
    pub const CFM: u64 = 11;
    pub const CWGAN: u64 = 12;
    pub const BAYES: u64 = 13;
    pub const SURROGATE: u64 = 14;
    pub const GENERATION: u64 = 20;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, stream: u64, counter: u64) -> u64 {
    splitmix(splitmix(splitmix(global) ^ stream) ^ counter)
}

pub fn rng_from_seed(seed: u64) -> BenchRng {
    ChaCha8Rng::seed_from_u64(seed)
}
