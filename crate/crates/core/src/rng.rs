//! Seeded scalar stream shared by every experiment.
//!
//! The generator is SplitMix64 with state initialised to the seed:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! next_u64 = z ^ (z >> 31)
//! ```
//!
//! Derived draws, so that other implementations can reproduce a stream:
//! - `next_f64 = (next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! - `uniform(lo, hi) = lo + (hi - lo) * next_f64`.
//! - `normal()` is Box-Muller on two consecutive draws `u1, u2`:
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`. The sine branch is discarded.
//! - `below(n) = next_u64 % n`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::tensor::{DType, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: SplitMix64,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent stream for a sub-task, e.g. instance `i` of a suite.
    pub fn derive(seed: u64, stream: u64) -> Rng {
        let mut base = Rng::new(seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let s = base.next_u64();
        Rng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Inclusive integer range.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        (self.uniform(lo.ln(), hi.ln())).exp()
    }

    pub fn normal_tensor(&mut self, dtype: DType, shape: impl Into<Shape>, std: f64) -> Tensor {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| std * self.normal()).collect();
        Tensor::from_parts(dtype, shape, data)
    }

    pub fn uniform_tensor(&mut self, dtype: DType, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| self.uniform(lo, hi)).collect();
        Tensor::from_parts(dtype, shape, data)
    }
}
