//! Counter-based random stream derivation.
//!
//! A master seed keys a ChaCha8 generator; each (purpose, level, repetition,
//! index) tuple selects a distinct 64-bit ChaCha stream. Streams never depend
//! on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Priors = 1,
    Rollout = 2,
    Sustain = 3,
    Shuffle = 5,
    Simulate = 6,
    TeTrajectory = 7,
}

/// Derives the stream for `(purpose, level, repetition, index)` under `master`.
pub fn substream(master: u64, purpose: Purpose, level: u8, repetition: u16, index: u32) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let stream = ((purpose as u64) << 56)
        | ((level as u64) << 48)
        | ((repetition as u64) << 32)
        | index as u64;
    rng.set_stream(stream);
    rng
}
