//! Deterministic RNG streams.
//!
//! Every stochastic component draws from a ChaCha stream derived from a
//! master seed plus a path of integer labels (replication index, subject
//! index, fold, bootstrap draw, ...). Streams are independent of scheduling,
//! so parallel runs reproduce serial runs bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream key from a master seed and a label path.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    let mut k = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    for &p in path {
        k = splitmix64(k ^ splitmix64(p.wrapping_add(0x9e37_79b9)));
    }
    k
}

/// A ChaCha8 stream keyed by `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, path))
}
