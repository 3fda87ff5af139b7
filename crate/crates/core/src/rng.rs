//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from a
//! root seed and a stream name, so data, initialization and dropout can be
//! reproduced independently of each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a, used only to turn stream names into seed material.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a named substream from a root seed.
pub fn substream(seed: u64, name: &str) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&seed.rotate_left(17).wrapping_mul(0x9e37_79b9_7f4a_7c15).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Derive a numbered substream (e.g. one per sample) from a root seed.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = substream(seed, name);
    rng.set_stream(index);
    rng
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    crate::math::sqrt(-2.0 * crate::math::ln(u1)) * crate::math::cos(2.0 * crate::math::PI * u2)
}

/// Uniform in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
