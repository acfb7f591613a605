//! Seeded random streams.
//!
//! Every consumer of randomness (weight init, shuffling, dropout masks, the
//! synthetic corpus) draws from its own ChaCha8 stream keyed by
//! `(seed, purpose, index)`. ChaCha is counter based, so streams are
//! independent of each other and of the order in which they are created,
//! which keeps parallel dropout masks reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Split = 2,
    Shuffle = 3,
    Dropout = 4,
    Synth = 5,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // top byte selects the purpose, the rest is the caller's index
    rng.set_stream(((purpose as u64) << 56) ^ (index & 0x00ff_ffff_ffff_ffff));
    rng
}
