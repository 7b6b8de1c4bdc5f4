//! Fixtures shared by the benchmarks.

use rand::Rng;

use oce_core::seed::rng_from_seed;
use oce_core::tensor::{Axis, Tensor};

pub fn uniform(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random `(y, z, t)` volume with values in `[-1, 1)`.
pub fn volume(ny: usize, nz: usize, nt: usize, seed: u64) -> Tensor {
    Tensor::new(vec![ny, nz, nt], vec![Axis::Y, Axis::Z, Axis::T], uniform(ny * nz * nt, seed)).expect("consistent layout")
}
