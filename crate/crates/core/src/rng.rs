//! Deterministic, splittable random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, purpose, index)`. Streams with different keys are independent,
//! so sampling instance `k` never depends on whether instances `< k` were
//! sampled, and the same key reproduces the same draws on every platform.

use crate::num::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 output function; the standard 64-bit finalizer.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapse `(seed, purpose, index)` into a single 64-bit sub-seed.
///
/// Documented so results can be reproduced outside this crate:
/// FNV-1a over the purpose bytes is folded into the seed, the index is
/// mixed in, and the result is finalized with SplitMix64.
pub fn mix_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in purpose.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut state = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    splitmix64(&mut state)
}

/// Counter-based stream keyed by `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = mix_seed(seed, purpose, index);
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Fill a fresh buffer with standard normal draws.
pub fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, len: usize) -> Vec<T> {
    (0..len)
        .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Uniform draw in `[0, 1)`.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>()
}
