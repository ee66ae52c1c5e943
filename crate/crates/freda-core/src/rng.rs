//! Seeded, splittable randomness.
//!
//! One root generator per run, with independent child streams derived by
//! `(root key, label)`. The derivation hashes the parent key and the label,
//! so child streams never overlap and the draw order inside one stream can
//! never perturb another — per-branch work stays reproducible regardless of
//! scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Deterministic generator (ChaCha12) with labeled substream derivation.
#[derive(Debug, Clone)]
pub struct SeededRng {
    key: [u8; 32],
    inner: ChaCha12Rng,
}

impl SeededRng {
    /// Root generator for a run.
    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"freda-rng-root");
        h.update(seed.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        SeededRng {
            key,
            inner: ChaCha12Rng::from_seed(key),
        }
    }

    /// Independent child stream for `label`. Derivation depends only on the
    /// creation key, not on how much of this stream has been consumed.
    pub fn substream(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"/");
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        SeededRng {
            key,
            inner: ChaCha12Rng::from_seed(key),
        }
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.inner.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
