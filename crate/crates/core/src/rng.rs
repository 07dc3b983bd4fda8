//! Seed-keyed random streams.
//!
//! Every stream is derived from `(domain, seed, item id, index)` through
//! SHA-256 into a ChaCha8 key, so results do not depend on the order in
//! which items are processed or on the platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn keyed_rng(domain: &str, seed: u64, item: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.update((item.len() as u64).to_le_bytes());
    hasher.update(item.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
