//! Seed derivation for reproducible runs.
//!
//! A [`SeedTree`] is split by integer labels into independent ChaCha
//! streams, so that dropout masks, initialization, shuffling and data
//! synthesis never share a generator and adding a consumer does not shift
//! the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    key: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix(seed) }
    }

    /// Child tree for `label`; children with different labels are independent.
    pub fn child(self, label: u64) -> Self {
        Self {
            key: splitmix(self.key ^ splitmix(label.wrapping_add(0xA076_1D64_78BD_642F))),
        }
    }

    pub fn rng(self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

/// Stream labels used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const GRADCHECK: u64 = 6;
}
