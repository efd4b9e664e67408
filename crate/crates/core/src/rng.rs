//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a base
//! seed plus a list of tags (sample index, step, purpose). Streams never share
//! state, so results do not depend on evaluation order or sharding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent 64-bit seed from a base seed and tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Returns a ChaCha8 generator for the `(seed, tags)` stream.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stable 64-bit tag for a string (parameter names, purposes).
pub fn name_tag(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
