//! Seeded random streams used for initialisation and synthetic data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic random stream; identical seeds give identical draws on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream, e.g. one per parameter tensor.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.random())
    }

    /// Fresh seed for a derived stream.
    pub fn next_seed(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: T) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.normal()) * std)
    }

    /// Normal draws rejected and redrawn outside `±2σ`.
    pub fn truncated_normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: T) -> Tensor<T> {
        Tensor::from_fn(shape, |_| loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                break T::lit(z) * std;
            }
        })
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: T, hi: T) -> Tensor<T> {
        let (lo, hi) = (lo.as_f64(), hi.as_f64());
        Tensor::from_fn(shape, |_| T::lit(self.uniform(lo, hi)))
    }
}
