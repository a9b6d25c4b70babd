//! Seed splitting.
//!
//! Every stochastic step draws from its own ChaCha stream, keyed by the run
//! seed plus a stream label. Streams never share state, so adding a draw in
//! one module cannot shift the numbers another module sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream labels used across the crate.
pub mod streams {
    pub const SYNTH: u64 = 1;
    pub const PROMPTS: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const PARAMS: u64 = 4;
    pub const DATA: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const PROBE: u64 = 7;
}

/// Independent generator for `(seed, stream, index)`.
///
/// `index` separates repeated uses of one stream, e.g. the i-th frame group.
pub fn stream(seed: u64, stream: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}
