//! Seeded weight initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{numel, Element, Tensor};

/// Deterministic sampler: one seed fixes every tensor drawn from it, in order.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn randn<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let data = (0..numel(shape)).map(|_| T::c(self.standard_normal() * std)).collect();
        Tensor::raw(shape.to_vec(), data)
    }

    /// Normal with standard deviation `std`, resampled until it falls in `[-2·std, 2·std]`.
    pub fn trunc_normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let data = (0..numel(shape))
            .map(|_| loop {
                let z = self.standard_normal();
                if z.abs() <= 2.0 {
                    break T::c(z * std);
                }
            })
            .collect();
        Tensor::raw(shape.to_vec(), data)
    }

    pub fn uniform<T: Element>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let data = (0..numel(shape)).map(|_| T::c(self.rng.random_range(lo..hi))).collect();
        Tensor::raw(shape.to_vec(), data)
    }

    /// He-normal for a conv/linear with the given fan-in.
    pub fn kaiming_normal<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.randn(shape, (2.0 / fan_in as f64).sqrt())
    }
}
