//! Seed derivation.
//!
//! All randomness in the simulator flows from explicit seeds. Child seeds are
//! derived by hashing a label and a list of integers with SHA-256, which keeps
//! streams independent and identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Derives a child seed from a domain label and integer parts.
pub fn derive_seed(label: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(label: &str, parts: &[u64]) -> SimRng {
    rng_from_seed(derive_seed(label, parts))
}
