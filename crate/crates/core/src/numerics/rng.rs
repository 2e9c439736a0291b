use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{shape_len, TensorValue};
use crate::error::{Error, Result};

/// Counter-addressed random stream.
///
/// The state is fully described by `(seed, counter)`: [`RngStream::at`]
/// reconstructs any position, and the next draw depends on nothing else.
/// The counter counts 32-bit words of the underlying ChaCha8 keystream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Stream positioned at `counter` words past the start of `seed`.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut s = Self::new(seed);
        s.inner.set_word_pos(counter as u128);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Independent child stream, derived from this seed and a label.
    pub fn fork(&self, label: u64) -> Self {
        let mut h = ChaCha8Rng::seed_from_u64(self.seed ^ label.rotate_left(17));
        h.set_stream(label);
        Self::new(h.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> TensorValue {
        let data: Vec<f64> = (0..shape_len(shape)).map(|_| self.standard_normal()).collect();
        TensorValue::new(shape, data).expect("shape and data agree")
    }

    /// Uniform integer in the closed range `[lo, hi]`.
    pub fn uniform_int(&mut self, lo: i64, hi: i64) -> Result<i64> {
        if hi < lo {
            return Err(Error::argument("range", alloc::format!("[{lo}, {hi}]")));
        }
        Ok(self.inner.random_range(lo..=hi))
    }

    pub fn index(&mut self, len: usize) -> usize {
        debug_assert!(len > 0);
        self.inner.random_range(0..len)
    }
}
