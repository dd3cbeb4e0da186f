//! Seeded random streams. One stream per `(N, replica)` pair so that runs with
//! different agent counts or replica indices never share draws.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const ALGORITHM: &str =
    "ChaCha20 (rand_chacha), key = seed little-endian, stream = (N << 16) | replica";

pub fn stream(seed: u64, agents: usize, replica: usize) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(((agents as u64) << 16) | replica as u64);
    rng
}

/// Uniform on `[0, 1)` from the top 53 bits of one 64-bit draw.
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
