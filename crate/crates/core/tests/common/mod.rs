#![allow(dead_code)]

use msnic_core::estimators::{grad_replicates, replicate_seed, EstimatorConfig};
use msnic_core::model::MICRO_PARAM_NAMES;
use msnic_core::objectives::evaluate;
use msnic_core::oracles::fixtures::Fixture;
use msnic_core::{GridMode, HierModel, SeededRng, Tape, Tensor};
use rayon::prelude::*;

pub fn micro_x(x: f64) -> Tensor {
    Tensor::full(&[1, 1, 1, 1], x)
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Replicate values of one bound.
#[allow(clippy::too_many_arguments)]
pub fn bound_samples(
    model: &HierModel,
    x: &Tensor,
    mode: GridMode,
    k: usize,
    l: usize,
    lambda: f64,
    n: usize,
    seed: u64,
) -> Vec<f64> {
    (0..n)
        .into_par_iter()
        .map(|r| {
            let tape = Tape::no_grad();
            let b = model.bind(&tape);
            let xv = tape.constant(x.clone());
            let mut rng = SeededRng::new(replicate_seed(seed, r), 0);
            evaluate(&b, &xv, mode, k, l, lambda, &mut rng).unwrap().report.total
        })
        .collect()
}

/// Per-coordinate replicate mean and standard error of an estimator, in
/// micro parameter order.
pub fn micro_grad_stats(
    model: &HierModel,
    x: &Tensor,
    cfg: &EstimatorConfig,
    n: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let reps = grad_replicates(model, x, cfg, n, seed).unwrap();
    let rows: Vec<Vec<f64>> = reps
        .iter()
        .map(|r| {
            let m = r.by_param(model).unwrap();
            MICRO_PARAM_NAMES.iter().map(|p| m[*p][0]).collect()
        })
        .collect();
    (0..MICRO_PARAM_NAMES.len()).map(|j| mean_se(&rows.iter().map(|r| r[j]).collect::<Vec<_>>())).unzip()
}

pub fn micro_from(f: &Fixture, direct_y: bool) -> (HierModel, Tensor, f64) {
    let p = f.input_vec("params").unwrap();
    let params: [f64; 10] = p.try_into().unwrap();
    (HierModel::micro(&params, direct_y), micro_x(f.input_f64("x").unwrap()), f.input_f64("lambda").unwrap())
}

/// Largest `|mean - truth| / se` over the coordinates.
pub fn max_z(mean: &[f64], se: &[f64], truth: &[f64]) -> f64 {
    mean.iter().zip(se).zip(truth).map(|((m, s), t)| (m - t).abs() / s).fold(0.0, f64::max)
}
