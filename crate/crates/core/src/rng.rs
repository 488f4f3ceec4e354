//! Deterministic random streams derived from one master seed.
//!
//! Each consumer asks for a stream by a stable string key; the stream seed is
//! the SHA-256 digest of the master seed and the key. Adding a new consumer
//! never shifts the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha20Rng;

pub fn stream(master_seed: u64, key: &str) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed)
}
