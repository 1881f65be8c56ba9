//! Seed-splitting scheme: all randomness in the library flows from a single
//! 64-bit seed plus a stream id, so parallel replications reproduce exactly
//! regardless of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Named sub-streams so independent consumers of the same seed never collide.
pub mod streams {
    pub const PHYSICAL_SAMPLE: u64 = 0;
    pub const MULTISTART: u64 = 1;
    pub const CV_FOLDS: u64 = 2;
}

/// Counter-based split: `(seed, stream)` selects an independent ChaCha stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
