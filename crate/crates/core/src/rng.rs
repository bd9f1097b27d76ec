//! Seeded randomness.
//!
//! Every stream in the crate is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`)
//! built with `SeedableRng::seed_from_u64`. That expands the 64-bit seed into
//! the 256-bit ChaCha key with PCG32, as specified by `rand_core`, so any
//! implementation of those two published algorithms reproduces the streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream for a given purpose (init, shuffling, data...).
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DATA: u64 = 3;
}
