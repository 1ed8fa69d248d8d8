//! Parameter initialization.

use alloc::vec::Vec;

use crate::math::sqrt;
use crate::params::Linear;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Xavier/Glorot uniform `[fan_in × fan_out]` matrix.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = sqrt(6.0 / (fan_in + fan_out) as f64);
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive fan sizes")
}

pub fn linear(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Linear {
    Linear {
        weight: xavier_uniform(fan_in, fan_out, rng),
        bias: Tensor::zeros(&[fan_out]),
    }
}
