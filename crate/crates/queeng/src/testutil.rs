//! Helpers shared by unit and integration tests.

use crate::tensor::Tensor;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform tensor in [-scale, scale] from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(-scale, scale);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).unwrap()
}

/// Central finite differences of a scalar function of one tensor.
pub fn finite_diff<F: Fn(&Tensor) -> f64>(x: &Tensor, f: F, step: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    grad
}

/// Max elementwise error, relative to the larger magnitude (floor 1.0).
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
