//! Deterministic, stateless RNG streams.
//!
//! Every random draw in the pipeline comes from a ChaCha8 stream derived
//! from `(seed, stream-label, index)`. Because the stream for step `n`
//! depends only on those three values, resuming a run from a checkpoint
//! reproduces the exact draws of an uninterrupted run with no RNG state
//! to persist.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// RNG for draw stream `label` at position `index` under `seed`.
pub fn stream_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a(label).rotate_left(17) ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Standard-normal tensor of the given shape.
pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}
