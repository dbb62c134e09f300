//! Seeded, portable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate, so that no two consumers share one.
pub mod streams {
    pub const TARGET_TABLE: u64 = 1;
    pub const DRAFTER_INIT: u64 = 2;
    pub const TRAIN_DATA: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const EVAL_PROMPTS: u64 = 5;
    pub const DECODE: u64 = 6;
    pub const DECODE_SHADOW: u64 = 7;
    pub const BERNOULLI: u64 = 8;
    pub const GRADCHECK: u64 = 9;
}
