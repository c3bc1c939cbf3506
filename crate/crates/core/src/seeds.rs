//! Seed-derivation tree.
//!
//! Every random stream in the crate is seeded by
//! `derive_seed(parent, path)`: the first eight bytes (little-endian) of
//! `SHA-256(parent_le_bytes || path)`. Nothing reads a global RNG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(parent: u64, path: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(path.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, path: &str) -> ChaCha8Rng {
    rng(derive_seed(parent, path))
}
