//! Labelled, seeded random streams.
//!
//! Every stochastic draw in the crate goes through an [`RngStream`]. A stream is
//! keyed by a 64-bit seed and a short label; the ChaCha key is the SHA-256 of
//! both, so streams with different labels are independent and the sequences
//! are identical on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            seed,
            label,
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    /// A child stream `"{label}/{sub}"` under the same seed.
    pub fn derive(&self, sub: impl std::fmt::Display) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, sub))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform on the open interval (0, 1); never returns 0 or 1.
    pub fn uniform_open(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        (bits as f64 + 0.5) / (1u64 << 53) as f64
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Standard Gumbel(0, 1) draw.
    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform_open())
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform_open() < p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `n` independent Gumbel(0, 1) samples.
pub fn gumbel_sample(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gumbel()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_fixed_point() {
        let u = (-1.0f64).exp();
        assert!(gumbel_from_uniform(u).abs() < 1e-15);
    }

    #[test]
    fn same_label_same_sequence() {
        let mut a = RngStream::new(7, "gumbel");
        let mut b = RngStream::new(7, "gumbel");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn labels_decorrelate() {
        let mut a = RngStream::new(7, "gumbel");
        let mut b = RngStream::new(7, "shadowing");
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| a.uniform_open()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.uniform_open()).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n as f64;
        // var of U(0,1) is 1/12; correlation of independent streams ~ N(0, 1/n)
        let corr = cov * 12.0;
        assert!(corr.abs() < 0.03, "corr {corr}");
    }

    #[test]
    fn uniform_open_excludes_endpoints() {
        let mut r = RngStream::new(1, "u");
        for _ in 0..100_000 {
            let u = r.uniform_open();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn gumbel_moments() {
        let mut r = RngStream::new(2024, "gumbel");
        let n = 1_000_000;
        let xs = gumbel_sample(&mut r, n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let euler_gamma = 0.577_215_664_901_532_9;
        assert!((mean - euler_gamma).abs() < 0.01, "mean {mean}");
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((var - pi2_6).abs() < 0.02, "var {var}");
    }
}
