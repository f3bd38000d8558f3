//! The four bounds and their training surrogates.
//!
//! Bounds are in nats per image, averaged over the batch. The distortion
//! likelihood is `ln p(x | y~) = -ln2 * lambda * 65025 * H * W * MSE`, so
//! that `-bound / (ln2 * H * W)` equals `bpp + lambda * MSE_255`, the
//! rate-distortion cost, whenever the bound is a single-sample ELBO.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_grid, BoundModel, GridMode, GridOptions, SampleGrid};
use crate::tensor::{normalized_weights, SeededRng, Tensor, Var};

/// How the detached importance weights combine the per-sample losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateStyle {
    /// One weight vector over the full log-weights.
    Joint,
    /// Separate weight vectors for distortion, `y` rate and `z` rate.
    #[default]
    PerTerm,
}

impl SurrogateStyle {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "per_term" => Ok(Self::PerTerm),
            _ => Err(Error::Config(format!("unknown surrogate style {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::PerTerm => "per_term",
        }
    }
}

/// Decomposed value of a bound.
///
/// The three terms are weighted averages of the per-sample log-domain
/// contributions under the normalized weights; for `elbo` they add up to
/// `total` exactly.
#[derive(Clone, Debug, Serialize)]
pub struct ObjectiveReport {
    pub mode: GridMode,
    pub k: usize,
    pub l: usize,
    pub lambda: f64,
    pub pixels: usize,
    /// Bound in nats per image.
    pub total: f64,
    pub distortion_term: f64,
    pub rate_y_term: f64,
    pub rate_z_term: f64,
    /// `[B, S]` log-weights.
    pub per_sample_log_w: Tensor,
    /// `[B, S]` normalized weights.
    pub weights: Tensor,
    /// Weighted `MSE` on the 0..255 scale.
    pub mse_255: f64,
}

impl ObjectiveReport {
    /// `-bound` in bits per pixel: the rate-distortion cost implied by the
    /// bound.
    pub fn rd_cost(&self) -> f64 {
        -self.total / (LN_2 * self.pixels as f64)
    }

    /// Estimated rate in bits per pixel.
    pub fn bpp(&self) -> f64 {
        -(self.rate_y_term + self.rate_z_term) / (LN_2 * self.pixels as f64)
    }
}

/// A bound evaluated on a tape: the report, the grid it came from and
/// the scalar bound node.
pub struct Evaluation {
    pub report: ObjectiveReport,
    pub grid: SampleGrid,
    pub bound: Var,
}

fn mean_scalar(v: &Var) -> f64 {
    v.value().mean()
}

/// Reduces a grid to its bound and report.
pub fn evaluate_grid(grid: SampleGrid) -> Result<Evaluation> {
    let bound = grid.log_w.log_mean_exp(1).mean_axis(0);
    let w = normalized_weights(&grid.log_w, 1, true)?;
    let weighted = |v: &Var| mean_scalar(&v.mul(&w).sum_axis(1));
    let d = weighted(&grid.y_to_slots(&grid.log_px));
    let mut yz = weighted(&grid.log_pyz);
    let mut z = weighted(&grid.z_to_slots(&grid.log_pz));
    if let (Some(qy), Some(qz)) = (&grid.log_qy, &grid.log_qz) {
        // fold the posterior density into the matching rate term
        yz -= weighted(&grid.y_to_slots(qy));
        z -= weighted(&grid.z_to_slots(qz));
    }
    let total = if grid.mode == GridMode::Elbo { d + yz + z } else { bound.item() };
    let scale = LN_2 * grid.lambda * 65025.0 * grid.pixels as f64;
    let mse_255 = if scale > 0.0 { -d / scale * 65025.0 } else { f64::NAN };
    let report = ObjectiveReport {
        mode: grid.mode,
        k: grid.k,
        l: grid.l,
        lambda: grid.lambda,
        pixels: grid.pixels,
        total,
        distortion_term: d,
        rate_y_term: yz,
        rate_z_term: z,
        per_sample_log_w: grid.log_w.value().clone(),
        weights: w.value().clone(),
        mse_255,
    };
    Ok(Evaluation { report, grid, bound })
}

/// Any bound by mode. `k` is ignored for `elbo`, `l` outside `dms`.
pub fn evaluate(
    model: &BoundModel<'_>,
    x: &Var,
    mode: GridMode,
    k: usize,
    l: usize,
    lambda: f64,
    rng: &mut SeededRng,
) -> Result<Evaluation> {
    let grid = build_grid(model, x, mode, k, l, lambda, rng.next_u64(), GridOptions::default())?;
    evaluate_grid(grid)
}

pub fn elbo(model: &BoundModel<'_>, x: &Var, lambda: f64, rng: &mut SeededRng) -> Result<Evaluation> {
    evaluate(model, x, GridMode::Elbo, 1, 1, lambda, rng)
}

pub fn iwae_bound(model: &BoundModel<'_>, x: &Var, k: usize, lambda: f64, rng: &mut SeededRng) -> Result<Evaluation> {
    evaluate(model, x, GridMode::Iwae, k, k, lambda, rng)
}

pub fn mix_bound(model: &BoundModel<'_>, x: &Var, k: usize, lambda: f64, rng: &mut SeededRng) -> Result<Evaluation> {
    evaluate(model, x, GridMode::Mix, k, 1, lambda, rng)
}

pub fn dms_bound(
    model: &BoundModel<'_>,
    x: &Var,
    k: usize,
    l: usize,
    lambda: f64,
    rng: &mut SeededRng,
) -> Result<Evaluation> {
    evaluate(model, x, GridMode::Dms, k, l, lambda, rng)
}

/// `sum_s sg(softmax(-loss))_s * loss_s` per image, averaged over the batch.
fn weighted_loss(loss: &Var) -> Result<Var> {
    let w = normalized_weights(&loss.neg(), 1, true)?;
    Ok(w.mul(loss).sum_axis(1).mean_axis(0))
}

/// Differentiable training loss in bits per pixel whose gradient is
/// built from detached normalized weights.
pub fn surrogate_loss(eval: &Evaluation, style: SurrogateStyle) -> Result<Var> {
    let g = &eval.grid;
    if !g.log_w.tape().is_recording() {
        return Err(Error::contract("surrogate loss needs a recording tape"));
    }
    let to_bpp = -1.0 / (LN_2 * g.pixels as f64);
    match style {
        SurrogateStyle::Joint => {
            // weights from the log-weights themselves, not the rescaled loss
            let w = normalized_weights(&g.log_w, 1, true)?;
            Ok(w.mul(&g.log_w.scale(to_bpp)).sum_axis(1).mean_axis(0))
        }
        SurrogateStyle::PerTerm => {
            let d = weighted_loss(&g.log_px.scale(to_bpp))?;
            let yz = weighted_loss(&g.log_pyz.scale(to_bpp))?;
            let z = weighted_loss(&g.log_pz.scale(to_bpp))?;
            Ok(d.add(&yz).add(&z))
        }
    }
}

/// `-bound` in bits per pixel, differentiated directly.
pub fn bound_loss(eval: &Evaluation) -> Var {
    eval.bound.scale(-1.0 / (LN_2 * eval.grid.pixels as f64))
}

/// `bpp + lambda * mse` with mean squared error on the 0..255 scale.
pub fn rd_cost(bpp: f64, mse_255: f64, lambda: f64) -> f64 {
    bpp + lambda * mse_255
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, HierModel};
    use crate::tensor::Tape;

    fn setup(direct_y: bool) -> (HierModel, Tensor) {
        let m = HierModel::new(ArchConfig::toy(), direct_y, 5).unwrap();
        let x = SeededRng::new(2, 0).centered_tensor(&[2, 3, 16, 16]).map(|v| v + 0.5);
        (m, x)
    }

    #[test]
    fn elbo_decomposes_exactly() {
        let (m, x) = setup(true);
        let tape = Tape::no_grad();
        let bm = m.bind(&tape);
        let e = elbo(&bm, &tape.constant(x), 0.01, &mut SeededRng::new(0, 0)).unwrap();
        let r = &e.report;
        assert_eq!(r.total, r.distortion_term + r.rate_y_term + r.rate_z_term);
        assert!((r.rd_cost() - rd_cost(r.bpp(), r.mse_255, 0.01)).abs() < 1e-9);
        assert!((r.total - e.bound.item()).abs() < 1e-9 * r.total.abs());
    }

    #[test]
    fn single_sample_degeneracies() {
        let (m, x) = setup(true);
        let tape = Tape::no_grad();
        let bm = m.bind(&tape);
        let x = tape.constant(x);
        let e = elbo(&bm, &x, 0.01, &mut SeededRng::new(4, 0)).unwrap().report.total;
        let mix = mix_bound(&bm, &x, 1, 0.01, &mut SeededRng::new(4, 0)).unwrap().report.total;
        let dms = dms_bound(&bm, &x, 1, 1, 0.01, &mut SeededRng::new(4, 0)).unwrap().report.total;
        assert!((e - mix).abs() <= 1e-12 * e.abs());
        assert!((e - dms).abs() <= 1e-12 * e.abs());
        let (m, _) = setup(false);
        let bm = m.bind(&tape);
        let e = elbo(&bm, &x, 0.01, &mut SeededRng::new(4, 0)).unwrap().report.total;
        let iw = iwae_bound(&bm, &x, 1, 0.01, &mut SeededRng::new(4, 0)).unwrap().report.total;
        assert!((e - iw).abs() <= 1e-12 * e.abs());
    }

    #[test]
    fn weights_sum_to_one() {
        let (m, x) = setup(true);
        let tape = Tape::no_grad();
        let bm = m.bind(&tape);
        let e = dms_bound(&bm, &tape.constant(x), 3, 2, 0.01, &mut SeededRng::new(4, 0)).unwrap();
        for row in e.report.weights.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_needs_recording_tape() {
        let (m, x) = setup(true);
        let tape = Tape::no_grad();
        let bm = m.bind(&tape);
        let e = elbo(&bm, &tape.constant(x), 0.01, &mut SeededRng::new(0, 0)).unwrap();
        assert!(surrogate_loss(&e, SurrogateStyle::Joint).is_err());
    }

    #[test]
    fn rd_cost_arithmetic() {
        assert!((rd_cost(0.5273, 32.61, 0.015) - 1.01645).abs() < 1e-9);
    }
}
