//! Portable random streams.
//!
//! All randomness goes through ChaCha8 (`rand_chacha` 0.3, `seed_from_u64`)
//! and the two conversions below, so datasets can be regenerated bit-exactly
//! by any port that implements the same generator:
//!
//! * uniform in `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! * standard normal: Box–Muller, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const RNG_DESCRIPTION: &str = "chacha8(seed_from_u64);stream=purpose;uniform=(u64>>11)*2^-53;normal=box-muller-cos";

pub type Rng = ChaCha8Rng;

/// Generator seeded with `seed` on the given stream.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn uniform(r: &mut Rng) -> f64 {
    (r.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform_in(r: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(r)
}

/// Integer uniformly drawn from `lo..=hi`.
pub fn int_in(r: &mut Rng, lo: i64, hi: i64) -> i64 {
    let span = (hi - lo + 1) as f64;
    (lo + (uniform(r) * span) as i64).min(hi)
}

pub fn normal(r: &mut Rng) -> f64 {
    let u1 = uniform(r);
    let u2 = uniform(r);
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Stable 64-bit digest of arbitrary labels, used to derive seeds.
pub fn hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(r: &mut Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = int_in(r, 0, i as i64) as usize;
        v.swap(i, j);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut r = stream(3, 0);
        for _ in 0..10_000 {
            let u = uniform(&mut r);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_are_standard() {
        let mut r = stream(11, 2);
        let xs: Vec<f64> = (0..50_000).map(|_| normal(&mut r)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: Vec<u64> = (0..4).map(|_| stream(5, 1).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(stream(5, 1).next_u64(), stream(5, 2).next_u64());
    }

    #[test]
    fn permutation_is_bijective() {
        let mut p = permutation(&mut stream(1, 1), 50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
