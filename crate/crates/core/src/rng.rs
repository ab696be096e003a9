//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 generator keyed by a
//! 64-bit seed and selected by a 64-bit stream id, so independent
//! components (data generation, initialization, batching, noise) never
//! share state and can be re-created in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate.
pub mod streams {
    pub const LINEAR_HISTORY: u64 = 1;
    pub const LINEAR_INTERVENTION: u64 = 2;
    pub const LINEAR_NOISE: u64 = 3;
    pub const FM_TOY: u64 = 10;
    pub const MODEL_INIT: u64 = 20;
    pub const BATCH_ORDER: u64 = 21;
    pub const DROPOUT: u64 = 22;
    pub const TEXT_RANDOM: u64 = 30;
    pub const TEXT_NOISE: u64 = 31;
    pub const FORECASTER_NOISE: u64 = 40;
}

/// Derives a sub-stream id, e.g. one per epoch or per event.
pub fn substream(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(1)
}
