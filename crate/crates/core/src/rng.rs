//! Seeded ChaCha8 streams and serializable RNG state for exact resume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids keep the run's RNG consumers independent of each other.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const ENV: u64 = 2;
    pub const ACTION: u64 = 3;
    pub const BUFFER: u64 = 4;
    pub const EVAL: u64 = 5;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Full generator state: seed, stream, and position within the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn save_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore_state(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}
