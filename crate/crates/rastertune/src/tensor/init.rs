//! Seeded weight initializers. All draws come from the caller's RNG so that
//! construction order alone determines the parameter bits.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

/// Normal(0, std) truncated at two standard deviations (resampled).
pub fn trunc_normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let mut v = Vec::with_capacity(n);
    while v.len() < n {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            v.push(x);
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// He-style truncated normal for conv/linear weights: std = sqrt(2 / fan_in).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    trunc_normal(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

/// Uniform in [-lim, lim].
pub fn uniform(shape: &[usize], lim: f32, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-lim..lim)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}
