//! Seed derivation for independent random streams.
//!
//! Every stochastic stage (rollout noise, loss-guidance draws, condition
//! sampling) draws from its own stream keyed by `(base seed, tags...)`, so
//! consuming more randomness in one stage never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes used by the trainer and objectives.
pub mod stream {
    pub const CONDITIONS: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const GUIDANCE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const INIT: u64 = 6;
    pub const CORPUS: u64 = 7;
    pub const ORACLE: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
