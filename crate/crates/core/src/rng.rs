//! Seeded random streams.
//!
//! Every stochastic stage draws from its own named substream of one run seed, so
//! changing how much randomness one stage consumes never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

/// FNV-1a, used only to turn a stage name into a stream id.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Root of a family of deterministic random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for the named stage.
    pub fn rng(&self, stage: &str) -> StageRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_id(stage));
        rng
    }

    /// Child seed family, e.g. one per benchmark trial.
    pub fn child(&self, name: &str, index: u64) -> SeedStream {
        let mut h = self.seed ^ stream_id(name).rotate_left(17);
        h = h.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        SeedStream::new(h ^ (h >> 31))
    }
}

/// Generator seeded directly from a user seed (no stage name).
pub fn rng_from_seed(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}
