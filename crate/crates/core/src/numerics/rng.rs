//! Seeded SplitMix64 generator with Box–Muller Gaussians.
//!
//! Uniforms take the top 53 bits of each 64-bit draw. Each Box–Muller
//! transform consumes two uniforms and yields two normals; the second is
//! cached for the next call, so 2N normals cost exactly 2N uniform draws.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::tensor::TensorBuffer;
use crate::error::{Error, Result};

pub const RNG_ALGORITHM: &str = "splitmix64+box-muller";

#[derive(Clone, Debug)]
pub struct DeterministicRng {
    inner: SplitMix64,
    cached_normal: Option<f64>,
    draws: u64,
}

impl DeterministicRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
            cached_normal: None,
            draws: 0,
        }
    }

    /// Independent stream keyed by `(seed, index)`, e.g. one per episode or observation.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut mixer = SplitMix64::seed_from_u64(seed ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        let a = mixer.next_u64();
        Self::new(a ^ index.rotate_left(17))
    }

    /// Number of 64-bit draws taken from the underlying stream so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn coin(&mut self) -> bool {
        self.uniform() < 0.5
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Standard-normal tensor of the given shape.
pub fn rng_gaussian(rng: &mut DeterministicRng, shape: &[usize]) -> Result<TensorBuffer> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!("rng_gaussian: invalid shape {shape:?}")));
    }
    let n = shape.iter().product();
    TensorBuffer::new(shape.to_vec(), rng.normal_vec(n))
}
