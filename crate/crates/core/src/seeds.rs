//! Named sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Seed of the sub-stream `name` under `root`, optionally indexed.
pub fn derive(root: u64, name: &str, index: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for i in index {
        h.update(i.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng(root: u64, name: &str, index: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, name, index))
}
