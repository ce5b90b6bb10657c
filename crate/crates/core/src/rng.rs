//! Deterministic random streams.
//!
//! Every random quantity in the toy backbone and the trainers is drawn from a
//! ChaCha stream keyed by a stable hash of (seed, purpose, payload), so the
//! same inputs always produce the same bits regardless of call order.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// FNV-1a over bytes; stable across platforms and releases.
fn fnv1a(bytes: &[u8], state: u64) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha stream keyed by (seed, purpose, payload parts).
pub fn stream(seed: u64, purpose: &str, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = fnv1a(&seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(purpose.as_bytes(), h);
    for part in parts {
        h = fnv1a(&(part.len() as u64).to_le_bytes(), h);
        h = fnv1a(part, h);
    }
    let mut state = h;
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn stream_for_tokens(seed: u64, purpose: &str, tokens: &[String]) -> ChaCha8Rng {
    let joined = tokens.join("\u{1f}");
    stream(seed, purpose, &[joined.as_bytes()])
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| rng.random_range(-scale..scale)))
}

/// Orthonormalizes the rows of `m` in place with modified Gram-Schmidt.
/// Panics if the rows are linearly dependent to working precision, which has
/// probability zero for Gaussian draws.
pub fn orthonormalize_rows(m: &mut Array2<f64>) {
    let rows = m.nrows();
    for i in 0..rows {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let prev = m.row(j).to_owned();
            let mut row = m.row_mut(i);
            row.scaled_add(-proj, &prev);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        assert!(norm > 1e-12, "degenerate basis draw");
        m.row_mut(i).mapv_inplace(|x| x / norm);
    }
}

/// A random orthogonal matrix close to the identity: orthonormalized
/// `I + spread * G` with Gaussian `G`.
pub fn near_identity_orthogonal(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Array2<f64> {
    let mut m = normal_mat(rng, n, n) * spread + Array2::<f64>::eye(n);
    orthonormalize_rows(&mut m);
    m
}
