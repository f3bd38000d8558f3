//! Pinned settings shared by the smoke runs, recorded fixtures, the CLI
//! defaults and the acceptance checks.

use crate::harness::data::{synthesize, Dataset, SyntheticKind};
use crate::model::{ArchConfig, GridMode, HierModel};
use crate::oracles::micro::MicroSpec;
use crate::trainer::TrainConfig;

/// Parameters of the reference micro model, in
/// [`crate::model::MICRO_PARAM_NAMES`] order.
pub const MICRO_PARAMS: [f64; 10] = [1.3, 0.1, 0.8, -0.2, 0.5, 0.3, 0.9, 0.05, 0.4, 0.1];
pub const MICRO_X: f64 = 0.7;
pub const MICRO_LAMBDA: f64 = 2e-4;

pub fn micro_spec(direct_y: bool) -> MicroSpec {
    MicroSpec { params: MICRO_PARAMS, x: MICRO_X, lambda: MICRO_LAMBDA, direct_y }
}

pub fn micro_model(direct_y: bool) -> HierModel {
    HierModel::micro(&MICRO_PARAMS, direct_y)
}

pub const SMOKE_SEED: u64 = 7;
pub const SMOKE_STEPS: usize = 200;
pub const SMOKE_LAMBDA: f64 = 0.01;
/// Larger than the default base rate so 200 steps make visible progress.
pub const SMOKE_LR: f64 = 1e-3;

/// 16 mixed synthetic 16x16 RGB images.
pub fn smoke_data() -> Dataset {
    synthesize(SyntheticKind::Mixed, 16, 16, 3, 1, 2.0, 2).expect("fixed synthetic settings")
}

/// 20 held-out mixed images for codec measurements.
pub fn eval_data() -> Dataset {
    synthesize(SyntheticKind::Mixed, 20, 16, 3, 2, 2.0, 2).expect("fixed synthetic settings")
}

pub fn smoke_model(direct_y: bool) -> HierModel {
    HierModel::new(ArchConfig::toy(), direct_y, SMOKE_SEED).expect("toy architecture is valid")
}

pub fn smoke_config(mode: GridMode, k: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(SMOKE_LAMBDA, mode);
    cfg.k = k;
    cfg.max_steps = Some(SMOKE_STEPS);
    cfg.lr_base = SMOKE_LR;
    cfg.seed = SMOKE_SEED;
    cfg.snr_replicates = 0;
    cfg
}

/// Settings of the rounding versus dithered quantization comparison: a
/// low trade-off and a longer run, where the latents have had time to
/// concentrate.
pub const UQ_LAMBDA: f64 = 0.002;
pub const UQ_STEPS: usize = 1500;

pub fn uq_config() -> TrainConfig {
    let mut cfg = smoke_config(GridMode::Elbo, 1);
    cfg.lambda = UQ_LAMBDA;
    cfg.max_steps = Some(UQ_STEPS);
    cfg
}
