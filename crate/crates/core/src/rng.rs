//! Seeded, labelled random streams.
//!
//! The generator is ChaCha20 (`rand_chacha::ChaCha20Rng`, 20 rounds, RFC 7539
//! constants) keyed with 32 bytes. The root key for seed `s` is
//! `SHA-256("noisebench/root" || s.to_le_bytes())`; the key of a child stream
//! labelled `l` is `SHA-256(parent_key || 0x00 || l)`. Child keys therefore
//! depend only on the parent key and the label, never on how many values
//! the parent has already produced.
//!
//! Derived samplers:
//! - `uniform()`: `(next_u64() >> 11) * 2^-53`, a value in `[0, 1)`.
//! - `standard_normal()`: Box–Muller. Two uniforms `u1, u2` are drawn in that
//!   order; `r = sqrt(-2 ln(1 - u1))`, the cosine branch `r cos(2π u2)` is
//!   returned first and the sine branch `r sin(2π u2)` is cached and returned
//!   by the following call.
//! - `below(n)`: high 64 bits of `next_u64() * n` (bias below `n / 2^64`).
//! - Beta draws delegate to `rand_distr::Beta` driven by this stream.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    key: [u8; 32],
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"noisebench/root");
        h.update(seed.to_le_bytes());
        Self::from_key(h.finalize().into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        Rng {
            key,
            inner: ChaCha20Rng::from_seed(key),
            spare_normal: None,
        }
    }

    /// Independent stream identified by `label`.
    pub fn child(&self, label: &str) -> Rng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([0u8]);
        h.update(label.as_bytes());
        Self::from_key(h.finalize().into())
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    pub fn gaussian_tensor(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Tensor> {
        sample_gaussian(self, rows, cols, mean, std)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// i.i.d. `N(mean, std²)` draws. `std == 0` returns a constant tensor without
/// consuming the stream.
pub fn sample_gaussian(rng: &mut Rng, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Tensor> {
    if std.is_nan() || std < 0.0 || !std.is_finite() || !mean.is_finite() {
        return Err(Error::Parameter(format!(
            "gaussian needs finite mean and std >= 0, got std {std}"
        )));
    }
    if std == 0.0 {
        return Ok(Tensor::full(rows, cols, mean));
    }
    let data = (0..rows * cols).map(|_| mean + std * rng.standard_normal()).collect();
    Tensor::from_vec(rows, cols, data)
}

/// i.i.d. `U(lo, hi)` draws. A zero-width interval returns a constant tensor
/// without consuming the stream.
pub fn sample_uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<Tensor> {
    if lo.is_nan() || hi.is_nan() || lo > hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Parameter(format!("uniform needs lo <= hi, got [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(Tensor::full(rows, cols, lo));
    }
    let width = hi - lo;
    let data = (0..rows * cols).map(|_| lo + width * rng.uniform()).collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn sample_beta(rng: &mut Rng, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Parameter(format!(
            "beta shapes must be positive, got ({a}, {b})"
        )));
    }
    let dist = rand_distr::Beta::new(a, b).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(dist.sample(rng).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_std(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        (m, var.sqrt())
    }

    #[test]
    fn zero_std_gaussian_is_constant() {
        let mut rng = Rng::new(1);
        let before = rng.clone().next_u64();
        let t = sample_gaussian(&mut rng, 3, 3, 0.0, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert_eq!(rng.next_u64(), before, "degenerate sampler must not consume");
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = sample_gaussian(&mut Rng::new(42), 4, 5, 0.0, 1.0).unwrap();
        let b = sample_gaussian(&mut Rng::new(42), 4, 5, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        let u1 = sample_uniform(&mut Rng::new(42), 4, 5, -1.0, 1.0).unwrap();
        let u2 = sample_uniform(&mut Rng::new(42), 4, 5, -1.0, 1.0).unwrap();
        assert_eq!(u1, u2);
    }

    #[test]
    fn gaussian_moments() {
        let t = sample_gaussian(&mut Rng::new(3), 1, 100_000, 0.0, 1.0).unwrap();
        let (m, s) = mean_std(t.data());
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((s - 1.0).abs() < 0.02, "std {s}");
    }

    #[test]
    fn negative_std_rejected() {
        assert!(matches!(
            sample_gaussian(&mut Rng::new(0), 1, 1, 0.0, -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn uniform_degenerate_and_moments() {
        let t = sample_uniform(&mut Rng::new(0), 2, 2, 0.5, 0.5).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.5));
        let t = sample_uniform(&mut Rng::new(4), 1, 100_000, 0.0, 1.0).unwrap();
        let (m, _) = mean_std(t.data());
        assert!((m - 0.5).abs() < 0.01);
        assert!(t.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        assert!(matches!(
            sample_uniform(&mut Rng::new(0), 1, 1, 1.0, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn beta_moments_and_support() {
        let mut rng = Rng::new(11);
        let uni: Vec<f64> = (0..100_000).map(|_| sample_beta(&mut rng, 1.0, 1.0).unwrap()).collect();
        assert!((mean_std(&uni).0 - 0.5).abs() < 0.01);
        let half: Vec<f64> = (0..100_000).map(|_| sample_beta(&mut rng, 0.5, 0.5).unwrap()).collect();
        assert!((mean_std(&half).0 - 0.5).abs() < 0.01);
        assert!(uni.iter().chain(&half).all(|&v| (0.0..=1.0).contains(&v)));
        assert!(sample_beta(&mut rng, 0.0, 1.0).is_err());
        assert!(sample_beta(&mut rng, 1.0, -2.0).is_err());
    }

    #[test]
    fn child_streams_are_distinct_and_stable() {
        let root = Rng::new(7);
        let labels = ["shuffle", "init", "toggles", "noise/0", "noise/1", "noise/10"];
        let prefixes: Vec<Vec<u64>> = labels
            .iter()
            .map(|l| {
                let mut c = root.child(l);
                (0..100).map(|_| c.next_u64()).collect()
            })
            .collect();
        for i in 0..prefixes.len() {
            for j in i + 1..prefixes.len() {
                assert_ne!(prefixes[i], prefixes[j], "{} vs {}", labels[i], labels[j]);
            }
        }
        // Consuming the parent does not change its children.
        let mut used = Rng::new(7);
        for _ in 0..1000 {
            used.next_u64();
        }
        assert_eq!(used.child("init").next_u64(), root.child("init").next_u64());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = Rng::new(2).permutation(257);
        p.sort_unstable();
        assert_eq!(p, (0..257).collect::<Vec<_>>());
    }
}
