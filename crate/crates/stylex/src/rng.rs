//! Deterministic RNG derivation.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived
//! from the global seed and a stream name, so changing one stage's seed
//! (or resuming mid-run) never perturbs the others. The derivation is
//! `SHA-256(global_seed_le || 0x1f || name)` taken as the 32-byte ChaCha
//! key, which is stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a named RNG stream from the global seed.
pub fn derive_rng(global_seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derive a per-epoch stream, so interrupted training can resume with the
/// exact sequence the uninterrupted run would have used.
pub fn derive_epoch_rng(global_seed: u64, name: &str, epoch: u64) -> ChaCha8Rng {
    derive_rng(global_seed, &format!("{name}/epoch{epoch}"))
}
