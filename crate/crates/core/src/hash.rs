//! Stable hashing and seeded random streams.
//!
//! All randomness in the harness comes from ChaCha8 streams. Per-item streams
//! are derived as `seed ^ stable_hash64(item_id)` so results do not depend on
//! the order in which items are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Identifier of the random generator, written into every output artifact.
pub const RNG_ID: &str = "chacha8";

/// First eight bytes (big endian) of the SHA-256 digest of `bytes`.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(word)
}

/// Hex SHA-256 of `bytes`, truncated to 16 hex characters.
pub fn fingerprint(bytes: &[u8]) -> String {
    format!("{:016x}", stable_hash64(bytes))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random stream private to one item (query id, record id, ...).
pub fn item_rng(seed: u64, item: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash64(item.as_bytes()))
}

/// Random stream for replicate `index` of a seeded procedure.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
