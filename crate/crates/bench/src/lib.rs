//! Fixed inputs shared by the benchmarks.

use msnic_core::densities::{discretize, GaussianCdf, IntegerPmf};
use msnic_core::harness::presets;
use msnic_core::trainer::stack;
use msnic_core::{SeededRng, Tensor};

/// The first `n` smoke images as one batch.
pub fn toy_batch(n: usize) -> Tensor {
    let data = presets::smoke_data();
    stack(&data.images.iter().take(n).collect::<Vec<_>>()).expect("same-shape images")
}

/// `n` symbols drawn near zero with one Gaussian table per symbol.
pub fn coder_stream(n: usize, seed: u64) -> (Vec<i64>, Vec<IntegerPmf>) {
    let mut rng = SeededRng::new(seed, 0);
    let pmfs: Vec<IntegerPmf> = (0..n)
        .map(|_| {
            discretize(&GaussianCdf { sigma: 0.2 + 4.0 * rng.uniform() }, rng.uniform() - 0.5, 1.0 - 1e-6, 16)
                .expect("valid table")
        })
        .collect();
    let syms = (0..n).map(|_| (rng.standard_normal() * 2.0).round() as i64).collect();
    (syms, pmfs)
}
