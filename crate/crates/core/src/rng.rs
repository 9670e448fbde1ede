//! Seeded random streams.
//!
//! Every random decision flows from the single run seed through a named
//! ChaCha stream, so enabling one feature never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    InitBase = 2,
    Negatives = 3,
    Synth = 4,
    Probe = 5,
    InitChains = 6,
    InitEncoders = 7,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
