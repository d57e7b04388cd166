//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from
//! the experiment seed, so adding draws in one place never perturbs
//! another, and a stream's position can be checkpointed exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids used by the experiment runner.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const GUMBEL: u64 = 3;
    pub const MEASUREMENT_NOISE: u64 = 4;
    pub const TEST_DATA: u64 = 5;
    pub const EVAL_MASK: u64 = 6;
    pub const EVAL_NOISE: u64 = 7;
    pub const BASELINE: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const SPLIT: u64 = 10;
}

pub fn seeded(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Exact position of a stream: `(seed, stream, word_pos)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl StreamState {
    pub fn capture(rng: &StreamRng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
