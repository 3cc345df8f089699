//! Deterministic, splittable randomness.
//!
//! Every random draw in the crate flows from a [`RngHandle`]: a `(seed, stream)`
//! pair that opens a ChaCha8 keystream. Two handles with the same pair replay the
//! same sequence; handles with different stream ids never share state, so
//! repetitions can run on any number of workers without changing results.
//!
//! Repetition `r` uses stream id `r`. Run-wide purposes (catalog, split,
//! population, ...) live on reserved stream ids at the top of the range, and
//! sub-purposes inside a repetition are derived with [`RngHandle::child`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// Reserved stream ids for run-wide draws.
pub mod streams {
    pub const CATALOG: u64 = u64::MAX;
    pub const SPLIT: u64 = u64::MAX - 1;
    pub const POPULATION: u64 = u64::MAX - 2;
    pub const NESTS: u64 = u64::MAX - 3;
    pub const BOOTSTRAP: u64 = u64::MAX - 4;
    /// Null pair `j` uses stream `NULL_BASE + j`.
    pub const NULL_BASE: u64 = 1 << 40;
}

/// Fixed child tags for purposes inside one stream.
pub mod purpose {
    pub const SLATES: u64 = 1;
    pub const CHOICES: u64 = 2;
    pub const OVEREXPOSURE: u64 = 3;
    pub const COMPETITION: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const TREATED: u64 = 7;
    pub const CONTROL: u64 = 8;
    pub const POPULATION: u64 = 9;
    pub const NULL_SLATES_B: u64 = 10;
    pub const GRADCHECK: u64 = 11;
    pub const MODEL: u64 = 0x100;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngHandle {
    pub seed: u64,
    pub stream: u64,
}

impl RngHandle {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngHandle { seed, stream }
    }

    /// Opens a fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Derives a sub-stream for a fixed purpose tag.
    pub fn child(&self, tag: u64) -> RngHandle {
        let mixed = splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d)));
        RngHandle {
            seed: self.seed,
            stream: mixed,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
