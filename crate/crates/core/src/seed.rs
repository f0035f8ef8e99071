//! Seed derivation. Every random stream in a run descends from one master seed
//! through labeled hashing, so stages can be re-run independently and in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `parent` and a label path.
pub fn derive_seed(parent: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Derives a child seed from `parent`, a label and an index (point, restart, ...).
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    derive_seed(parent, &[label, &index.to_string()])
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
