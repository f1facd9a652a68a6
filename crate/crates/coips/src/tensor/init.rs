//! Deterministic He-uniform fan-in weight initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn he_uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor { shape, data }
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Tensor<f32> {
        Tensor::zeros(shape)
    }
}
