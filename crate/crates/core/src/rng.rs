//! Deterministic randomness: one master seed fans out into named substreams.
//!
//! Every stochastic component takes a [`Rng`] created through [`sub_rng`].
//! Deriving substream seeds by hashing `seed || label` keeps independent
//! consumers (data synthesis, corruption, training noise, sampling)
//! decoupled: adding draws to one stream never shifts another, which is what
//! makes end-to-end runs byte-for-byte reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Derive a 32-byte substream seed from a master seed and a label.
pub fn subseed(seed: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.finalize().into()
}

/// An RNG for the named substream of `seed`.
pub fn sub_rng(seed: u64, label: &str) -> Rng {
    Rng::from_seed(subseed(seed, label))
}
