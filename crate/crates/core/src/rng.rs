//! Seed derivation and counter-addressable random streams.
//!
//! Every random decision in the crate is drawn from a ChaCha8 stream selected by
//! `(seed, domain, stream index)`, so results never depend on evaluation order
//! or thread count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream domains; distinct generators never share a stream.
pub(crate) mod domain {
    pub const POINT: u64 = 1;
    pub const BLOCK: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const COMPOUND: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const SYNTHETIC: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of tags into a new seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// ChaCha8 keyed by `(seed, domain)` and positioned on stream `stream`.
pub(crate) fn stream_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Stream index of series `(b, m)`.
pub(crate) fn series_stream(b: usize, m: usize) -> u64 {
    ((b as u64) << 32) | m as u64
}

/// Uniform in `[0, 1)` from the top 53 bits of one `u64`.
pub(crate) fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[lo, hi]` by widening multiply.
pub(crate) fn uniform_inclusive(rng: &mut impl RngCore, lo: usize, hi: usize) -> usize {
    debug_assert!(lo <= hi);
    let span = (hi - lo + 1) as u128;
    lo + ((rng.next_u64() as u128 * span) >> 64) as usize
}
