//! Deterministic random number generation.
//!
//! Everything stochastic in the crate (init, shuffling, reparameterization
//! noise, synthetic generators) goes through [`Rng`], a thin wrapper over
//! ChaCha8 so that a seed pins the full sequence across runs and platforms.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mixes a seed with stream identifiers into a fresh sub-seed. Used to give
/// each (step, batch item) pair its own independent noise stream regardless
/// of evaluation order.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut x = master ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xbf58476d1ce4e5b9);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent generator for a named substream.
    pub fn substream(&self, a: u64, b: u64) -> Rng {
        Rng::new(derive_seed(self.seed, a, b))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn gen_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_index on empty range");
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Standard normal via Box-Muller (pairs cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u keeps the argument of ln strictly positive.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn shuffle<T>(&mut self, data: &mut [T]) {
        for i in (1..data.len()).rev() {
            let j = self.gen_index(i + 1);
            data.swap(i, j);
        }
    }

    /// Distinct indices from 0..n, sorted ascending (partial Fisher-Yates).
    pub fn sample_indices(&mut self, n: usize, k: usize, scratch: &mut Vec<usize>) -> Vec<usize> {
        assert!(k <= n);
        scratch.clear();
        scratch.extend(0..n);
        for i in 0..k {
            let j = i + self.gen_index(n - i);
            scratch.swap(i, j);
        }
        let mut picked: Vec<usize> = scratch[..k].to_vec();
        picked.sort_unstable();
        picked
    }

    /// Serializable position within the stream (for checkpoint round-trips).
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_word_pos(word_pos);
        Rng {
            seed,
            inner,
            spare_normal: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(42);
        let n = 100_000;
        let xs = rng.normal_vec(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn restore_resumes_stream() {
        let mut a = Rng::new(9);
        for _ in 0..17 {
            a.uniform();
        }
        let pos = a.word_pos();
        let mut b = Rng::restore(9, pos);
        for _ in 0..50 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn sample_indices_distinct_sorted() {
        let mut rng = Rng::new(3);
        let mut scratch = Vec::new();
        for _ in 0..50 {
            let picked = rng.sample_indices(100, 10, &mut scratch);
            assert_eq!(picked.len(), 10);
            for w in picked.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }
}
