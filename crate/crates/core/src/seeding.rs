//! Keyed deterministic random streams.
//!
//! Every stream is derived from the run seed plus a list of string keys, so the
//! draws for one (relation, target) never depend on processing order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn rng_for(seed: u64, keys: &[&str]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for key in keys {
        hasher.update((key.len() as u64).to_le_bytes());
        hasher.update(key.as_bytes());
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}
