//! Master-seed policy.
//!
//! Every stochastic stage draws from a ChaCha8 stream keyed by
//! `SHA-256(master_le_u64 ‖ 0x00 ‖ stage_utf8 ‖ 0x00 ‖ index_0_le_u64 ‖ index_1_le_u64 …)`;
//! the 32-byte digest is the ChaCha seed. Implementations in other languages
//! reproduce identical streams by hashing the same byte string.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Generator for `(master, stage, indices…)`.
pub fn derive_rng(master: u64, stage: &str, indices: &[u64]) -> StageRng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0u8]);
    h.update(stage.as_bytes());
    h.update([0u8]);
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// A 64-bit sub-seed, for APIs that take a plain seed.
pub fn derive_seed(master: u64, stage: &str, indices: &[u64]) -> u64 {
    use rand::RngCore;
    derive_rng(master, stage, indices).next_u64()
}
