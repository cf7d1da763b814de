//! Deterministic random-stream derivation.
//!
//! Every stochastic source in a replication gets its own ChaCha8 stream,
//! keyed by `(master, replication, tag, index)`. The policy under test is not
//! part of the key, so compared policies see the same traffic realizations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags.
pub mod tag {
    pub const PU_TRAFFIC: u64 = 1;
    pub const PU_RETRANSMIT: u64 = 2;
    pub const SU_TRAFFIC: u64 = 3;
    pub const RADIO: u64 = 4;
    pub const ASSIGN: u64 = 5;
    pub const RESIDUAL: u64 = 6;
    pub const EXPLORE: u64 = 7;
    pub const CAPACITY: u64 = 8;
    pub const SCENARIO: u64 = 9;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeeds {
    pub master: u64,
    pub replication: u64,
}

impl StreamSeeds {
    pub fn new(master: u64, replication: u64) -> Self {
        StreamSeeds {
            master,
            replication,
        }
    }

    pub fn seed(&self, tag: u64, index: u64) -> u64 {
        let mut h = splitmix64(self.master);
        for part in [self.replication, tag, index] {
            h = splitmix64(h ^ part.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
        h
    }

    pub fn rng(&self, tag: u64, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(tag, index))
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
