//! Input fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sst_core::Tensor;

pub fn normal(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

pub fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Inputs of a selective scan: `(u, dt, a, b, c, d)` for `len` steps,
/// `e` channels and state size `n`.
pub fn scan_inputs(len: usize, e: usize, n: usize) -> [Tensor; 6] {
    [
        normal(1, &[1, len, e]),
        uniform(2, &[1, len, e], 0.01, 0.5),
        uniform(3, &[e, n], -2.0, -0.1),
        normal(4, &[1, len, n]),
        normal(5, &[1, len, n]),
        normal(6, &[e]),
    ]
}
