use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Tensor;

/// He/Kaiming normal initialization: `N(0, sqrt(2 / fan_in))`.
pub fn kaiming_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from caller")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense layers.
pub fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from caller")
}
