//! Seed splitting. Every consumer of randomness asks for its own ChaCha
//! stream keyed by `(purpose, index)`, so adding draws in one place never
//! shifts the numbers another place sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ModelInit = 1,
    Growth = 2,
    TaskAngles = 3,
    Shuffle = 4,
    Replay = 5,
    Synth = 6,
    GradCheck = 7,
    Subsample = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, purpose: Purpose, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 48) ^ index);
        rng
    }
}
