//! Seeded random fixtures shared by tests, the CLI and the Python bindings.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::AttnInputs;
use crate::tensor::Tensor;

/// Uniform values in `[-1, 1)`.
pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Standard-normal values scaled by `std`.
pub fn gaussian_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Small integers in `[-range, range]`, useful where exact arithmetic is wanted.
pub fn integer_tensor<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    range: i64,
) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-range..=range) as f64)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

pub fn random_inputs<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> AttnInputs {
    let q = uniform_tensor(rng, n, d);
    let k = uniform_tensor(rng, n, d);
    let v = uniform_tensor(rng, n, d);
    AttnInputs::new(q, k, v).expect("consistent shapes")
}
