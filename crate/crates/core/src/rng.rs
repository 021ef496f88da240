//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that an
//! ablation changing one consumer leaves the others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Batch order and data sampling.
    Data = 1,
    Mask = 2,
    Distractor = 3,
    /// Parameter initialization.
    Init = 4,
    /// Gumbel noise inside the quantizer.
    Gumbel = 5,
    /// Synthetic corpus generation.
    Synth = 6,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
