//! Seed plumbing: one master seed, named sub-streams derived by hashing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a 64-bit sub-seed from `(master, stream)`.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Sub-seed indexed by a stream name plus integer coordinates (sample id, epoch, ...).
pub fn derive_seed_indexed(master: u64, stream: &str, idx: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    for i in idx {
        h.update(i.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named streams of an experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    pub master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn seed(&self, stream: &str) -> u64 {
        derive_seed(self.master, stream)
    }

    pub fn rng(&self, stream: &str) -> Rng {
        rng_from(self.seed(stream))
    }

    pub fn child(&self, stream: &str) -> SeedTree {
        SeedTree::new(self.seed(stream))
    }
}
