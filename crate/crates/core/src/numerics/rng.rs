//! Seeded randomness.
//!
//! Every stream is ChaCha8 keyed by `seed_from_u64(seed)` with a 64-bit stream
//! id. ChaCha is counter based and platform independent, so a `(seed, stream)`
//! pair always yields the same sequence. Components take their own stream via
//! [`Rng::fork`] so adding draws to one component never shifts another.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream ids handed out to pipeline components.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const PAIRS: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PROBE: u64 = 6;
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Independent generator for the same seed on another stream.
    ///
    /// Forks compose: `fork(a).fork(b)` lands on stream `a * 2^32 + b` hashed
    /// into a distinct id, never on the parent's stream.
    pub fn fork(&self, stream: u64) -> Rng {
        let id = self.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(32) ^ stream.wrapping_add(1);
        Rng::with_stream(self.seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        self.inner.random_range(0..n)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    pub fn fill_uniform(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.uniform();
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}
