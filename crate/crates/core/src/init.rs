use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Seeded weight initializer. Every draw advances one ChaCha stream, so a
/// model built in a fixed order is bitwise reproducible.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }

    /// He-normal: `std = sqrt(2 / fan_in)`.
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f32).sqrt())
    }

    /// `std = 1 / sqrt(fan_in)`, for projections feeding a residual stream.
    pub fn lecun(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (1.0 / fan_in as f32).sqrt())
    }
}
