//! Addressable, splittable random streams.
//!
//! A stream is a value `(root_seed, path)`. Its generator is seeded by folding
//! every path label into the root seed with a splitmix64 finalizer, so any
//! substream can be materialized independently of the order in which other
//! substreams were used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub root_seed: u64,
    pub path: Vec<u64>,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            path: Vec::new(),
        }
    }

    /// Substream addressed by one more label.
    pub fn child(&self, label: u64) -> Self {
        let mut path = self.path.clone();
        path.push(label);
        Self {
            root_seed: self.root_seed,
            path,
        }
    }

    /// Substream addressed by a textual label (hashed with FNV-1a).
    pub fn named(&self, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.child(h)
    }

    pub fn seed(&self) -> u64 {
        let mut h = splitmix64(self.root_seed);
        for &label in &self.path {
            h = splitmix64(h.rotate_left(23) ^ splitmix64(label ^ 0x5851_F42D_4C95_7F2D));
        }
        h
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed())
    }
}
