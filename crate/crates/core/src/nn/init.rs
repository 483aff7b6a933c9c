//! Weight initialisers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Real, Tensor};

/// Standard deviation used for every random initialiser.
pub const INIT_STD: f64 = 0.02;

/// Normal draws with the given `std`, resampled until they fall within two
/// standard deviations.
pub fn truncated_normal<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

pub fn normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}
