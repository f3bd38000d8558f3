//! Gradient estimators for the bounds and the gradient SNR tracer.
//!
//! Gradients are of the bound in nats per image (batch mean), grouped by
//! [`Group`]. Within a group, parameters are concatenated in name order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_grid, DetachPath, GridMode, GridOptions, Group, HierModel, NoiseFamily, ZSource};
use crate::objectives::{evaluate_grid, surrogate_loss, SurrogateStyle};
use crate::quadrature::Rule;
use crate::tensor::{normalized_weights, pairwise_sum, Gradients, SeededRng, Tape, Tensor, Var};

/// Floor on the standard deviation in the SNR ratio.
pub const SNR_STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Pathwise,
    StlDecomposed,
    ScoreFunction,
    Dreg,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pathwise => "pathwise",
            Self::StlDecomposed => "stl_decomposed",
            Self::ScoreFunction => "score_function",
            Self::Dreg => "dreg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pathwise" => Ok(Self::Pathwise),
            "stl_decomposed" => Ok(Self::StlDecomposed),
            "score_function" => Ok(Self::ScoreFunction),
            "dreg" => Ok(Self::Dreg),
            _ => Err(Error::Config(format!("unknown estimator {s:?}"))),
        }
    }
}

/// One gradient sample, flattened per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEstimate {
    pub values: BTreeMap<Group, Vec<f64>>,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub mode: GridMode,
    pub k: usize,
    pub l: usize,
}

impl GradEstimate {
    /// All coordinates in group order.
    pub fn flat(&self) -> Vec<f64> {
        self.values.values().flatten().copied().collect()
    }

    /// Elementwise sum; both sides must share the layout.
    pub fn plus(&self, other: &GradEstimate) -> Result<GradEstimate> {
        let mut out = self.clone();
        for (g, v) in out.values.iter_mut() {
            let o = other.values.get(g).filter(|o| o.len() == v.len());
            let o = o.ok_or_else(|| Error::Shape(format!("group {g} layout differs")))?;
            v.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        Ok(out)
    }

    /// Coordinates regrouped by parameter name of `model`, the model the
    /// estimate was taken on.
    pub fn by_param(&self, model: &HierModel) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut cursor: BTreeMap<Group, usize> = BTreeMap::new();
        let mut out = BTreeMap::new();
        for (name, t) in model.params() {
            let g = Group::of(name).ok_or_else(|| Error::contract(format!("{name} has no group")))?;
            let at = cursor.entry(g).or_insert(0);
            let v = self.values.get(&g).and_then(|v| v.get(*at..*at + t.len()));
            let v = v.ok_or_else(|| Error::Shape(format!("estimate does not cover {name}")))?;
            out.insert(name.clone(), v.to_vec());
            *at += t.len();
        }
        Ok(out)
    }

    /// CSV rows `group,statistic,value,seed,stage`, one per coordinate.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (g, v) in &self.values {
            for (i, x) in v.iter().enumerate() {
                let _ = writeln!(s, "{},grad[{i}],{x:e},{},-", g.name(), self.seed);
            }
        }
        s
    }
}

/// Per-group flattened gradient from a backprop result. Parameters absent
/// from `grads` contribute zeros.
pub(crate) fn group_values(model: &HierModel, grads: &Gradients) -> BTreeMap<Group, Vec<f64>> {
    let mut out: BTreeMap<Group, Vec<f64>> = Group::ALL.iter().map(|&g| (g, Vec::new())).collect();
    for (name, t) in model.params() {
        let g = Group::of(name).expect("partition checked at construction");
        let dst = out.get_mut(&g).expect("all groups present");
        match grads.param(name) {
            Some(d) => dst.extend_from_slice(d.data()),
            None => dst.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    out
}

/// The key that [`crate::objectives::evaluate`] draws from
/// `SeededRng::new(seed, 0)`, so estimators and bounds share noise.
pub fn noise_key(seed: u64) -> u64 {
    SeededRng::new(seed, 0).next_u64()
}

/// Seed of replicate `r` derived from a base seed.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    SeededRng::new(base, r as u64 + 1).next_u64()
}

#[allow(clippy::too_many_arguments)]
fn bound_gradient(
    model: &HierModel,
    x: &Tensor,
    mode: GridMode,
    k: usize,
    l: usize,
    lambda: f64,
    seed: u64,
    family: NoiseFamily,
) -> Result<BTreeMap<Group, Vec<f64>>> {
    let tape = Tape::new();
    let bm = model.bind(&tape);
    let xv = tape.constant(x.clone());
    let opts = GridOptions { family, detach: DetachPath::None };
    let grid = build_grid(&bm, &xv, mode, k, l, lambda, noise_key(seed), opts)?;
    let bound = grid.log_w.log_mean_exp(1).mean_axis(0);
    Ok(group_values(model, &tape.backprop(&bound)?))
}

/// Gradient of the chosen bound through the reparameterized samples.
///
/// Under the uniform posterior the log-density is flat on its support, so
/// this already is the sticking-the-landing estimator.
pub fn pathwise_grad(
    model: &HierModel,
    x: &Tensor,
    mode: GridMode,
    k: usize,
    l: usize,
    lambda: f64,
    seed: u64,
) -> Result<GradEstimate> {
    let values = bound_gradient(model, x, mode, k, l, lambda, seed, NoiseFamily::Uniform)?;
    Ok(GradEstimate { values, estimator: EstimatorKind::Pathwise, seed, mode, k, l })
}

/// Gradient of the training surrogate under `style`, rescaled from bits
/// per pixel of loss to nats per image of bound so it is directly
/// comparable with [`pathwise_grad`].
#[allow(clippy::too_many_arguments)]
pub fn surrogate_grad(
    model: &HierModel,
    x: &Tensor,
    mode: GridMode,
    k: usize,
    l: usize,
    lambda: f64,
    seed: u64,
    style: SurrogateStyle,
) -> Result<GradEstimate> {
    let tape = Tape::new();
    let bm = model.bind(&tape);
    let xv = tape.constant(x.clone());
    let grid = build_grid(&bm, &xv, mode, k, l, lambda, noise_key(seed), GridOptions::default())?;
    let pixels = grid.pixels as f64;
    let eval = evaluate_grid(grid)?;
    let loss = surrogate_loss(&eval, style)?.scale(-std::f64::consts::LN_2 * pixels);
    let values = group_values(model, &tape.backprop(&loss)?);
    Ok(GradEstimate { values, estimator: EstimatorKind::Pathwise, seed, mode, k, l })
}

/// `-d/dphi ln q(v; phi)` summed over the given posterior evaluations with
/// the samples held fixed, as a batch mean.
fn score_term(model: &HierModel, x: &Tensor, seed: u64, family: NoiseFamily, lambda: f64) -> Result<GradEstimate> {
    // The samples come from a no-grad replay of the same grid.
    let replay = Tape::no_grad();
    let bm = model.bind(&replay);
    let xv = replay.constant(x.clone());
    let opts = GridOptions { family, detach: DetachPath::None };
    let grid = build_grid(&bm, &xv, GridMode::Elbo, 1, 1, lambda, noise_key(seed), opts)?;
    let (ys, zs) = (grid.y_samples.value().clone(), grid.z_samples.value().clone());

    let tape = Tape::new();
    let bm = model.bind(&tape);
    let xv = tape.constant(x.clone());
    let qy = bm.infer_y(&xv)?;
    let y_const = tape.constant(ys);
    let qz =
        if model.direct_y() { bm.infer_z(ZSource::Mean(qy.mean()))? } else { bm.infer_z(ZSource::Samples(&y_const))? };
    let z_const = tape.constant(zs);
    let batch = x.shape()[0] as f64;
    let log_q = match family {
        NoiseFamily::Uniform => qy.log_density(&y_const).sum_all().add(&qz.log_density(&z_const).sum_all()),
        NoiseFamily::Gaussian { std, .. } => {
            gauss_log_density(&y_const, qy.mean(), std).add(&gauss_log_density(&z_const, qz.mean(), std))
        }
    };
    let loss = log_q.scale(-1.0 / batch);
    let values = group_values(model, &tape.backprop(&loss)?);
    Ok(GradEstimate { values, estimator: EstimatorKind::ScoreFunction, seed, mode: GridMode::Elbo, k: 1, l: 1 })
}

fn gauss_log_density(v: &Var, mean: &Var, std: f64) -> Var {
    let c = -(std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
    v.sub(mean).scale(1.0 / std).square().scale(-0.5).add_scalar(c).sum_all()
}

fn stl_with(
    model: &HierModel,
    x: &Tensor,
    lambda: f64,
    seed: u64,
    family: NoiseFamily,
) -> Result<(GradEstimate, GradEstimate)> {
    let family_stopped = match family {
        NoiseFamily::Gaussian { std, .. } => NoiseFamily::Gaussian { std, stop_q_params: true },
        f => f,
    };
    let values = bound_gradient(model, x, GridMode::Elbo, 1, 1, lambda, seed, family_stopped)?;
    let path = GradEstimate { values, estimator: EstimatorKind::StlDecomposed, seed, mode: GridMode::Elbo, k: 1, l: 1 };
    Ok((path, score_term(model, x, seed, family, lambda)?))
}

/// The two parts of the single-sample gradient: the pathwise term through
/// the samples, and the parameter score term `-E[d/dphi ln q]`. Under the
/// uniform posterior the score term is `+0.0` in every coordinate.
pub fn stl_terms(model: &HierModel, x: &Tensor, lambda: f64, seed: u64) -> Result<(GradEstimate, GradEstimate)> {
    stl_with(model, x, lambda, seed, NoiseFamily::Uniform)
}

/// Scalar test functions for the score-function demonstration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFn {
    Square,
    Cube,
    Sin,
}

impl TestFn {
    pub const ALL: [TestFn; 3] = [TestFn::Square, TestFn::Cube, TestFn::Sin];

    pub fn name(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Cube => "cube",
            Self::Sin => "sin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown test function {s:?}")))
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::Square => x * x,
            Self::Cube => x * x * x,
            Self::Sin => x.sin(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Square => 2.0 * x,
            Self::Cube => 3.0 * x * x,
            Self::Sin => x.cos(),
        }
    }

    fn on_tape(self, v: &Var) -> Var {
        match self {
            Self::Square => v.square(),
            Self::Cube => v.square().mul(v),
            Self::Sin => v.sin(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DemoResult {
    pub score_estimate: f64,
    pub pathwise_estimate: f64,
    /// Standard error of the pathwise mean.
    pub pathwise_se: f64,
    pub truth: f64,
}

/// `d/dtheta E[f(theta + eps)]` for `eps ~ U[-1/2, 1/2)`, three ways: the
/// score-function estimator (identically zero, since the log-density has
/// zero derivative on its support), the pathwise estimator, and a
/// quadrature of the integrand.
pub fn uniform_score_gradient_demo(f: TestFn, theta: f64, n: usize, seed: u64) -> Result<DemoResult> {
    if n == 0 {
        return Err(Error::contract("demo needs at least one sample"));
    }
    let eps = SeededRng::new(seed, 0).centered_tensor(&[n]);

    // score function: mean f(v_i) d/dtheta ln q(v_i; theta), samples fixed
    let tape = Tape::new();
    let th = tape.param("theta", Tensor::vector(&[theta]));
    let post = crate::densities::UniformPosterior::new(th.expand(&[n]));
    let v = eps.map(|e| theta + e);
    let fv = tape.constant(v.map(|s| f.eval(s)));
    let surrogate = fv.mul(&post.log_density(&tape.constant(v))).mean_all();
    let score_estimate = tape.backprop(&surrogate)?.param("theta").expect("theta is a param").item();

    // pathwise: per-sample copies of theta give the per-sample gradients
    let tape = Tape::new();
    let th = tape.param("theta", Tensor::full(&[n], theta));
    let total = f.on_tape(&th.add(&tape.constant(eps))).sum_all();
    let per_sample = tape.backprop(&total)?.param("theta").expect("theta is a param").clone();
    let d = per_sample.data();
    let mean = pairwise_sum(d) / n as f64;
    let var = if n > 1 {
        pairwise_sum(&d.iter().map(|g| (g - mean) * (g - mean)).collect::<Vec<_>>()) / (n - 1) as f64
    } else {
        0.0
    };

    let truth = Rule::on(16, -0.5, 0.5).integrate(|e| f.derivative(theta + e));
    Ok(DemoResult { score_estimate, pathwise_estimate: mean, pathwise_se: (var / n as f64).sqrt(), truth })
}

#[allow(clippy::too_many_arguments)]
fn dreg_with(
    model: &HierModel,
    x: &Tensor,
    k: usize,
    lambda: f64,
    seed: u64,
    family: NoiseFamily,
) -> Result<GradEstimate> {
    let mode = if model.direct_y() { GridMode::Mix } else { GridMode::Iwae };
    let key = noise_key(seed);
    let stopped = match family {
        NoiseFamily::Gaussian { std, .. } => NoiseFamily::Gaussian { std, stop_q_params: true },
        f => f,
    };
    let is_inference = |n: &str| Group::of(n).is_some_and(Group::is_inference);

    // inference groups: the squared-weight surrogate, on the y path for
    // the mixture and on the whole sample path for paired samples
    let partial = |detach: DetachPath, power: i32| -> Result<BTreeMap<Group, Vec<f64>>> {
        let tape = Tape::new();
        let bm = model.bind_partial(&tape, is_inference);
        let xv = tape.constant(x.clone());
        let grid = build_grid(&bm, &xv, mode, k, k, lambda, key, GridOptions { family: stopped, detach })?;
        let mut w = normalized_weights(&grid.log_w, 1, true)?;
        if power == 2 {
            w = w.square();
        }
        let surrogate = w.mul(&grid.log_w).sum_axis(1).mean_axis(0);
        Ok(group_values(model, &tape.backprop(&surrogate)?))
    };
    let mut values = match mode {
        GridMode::Iwae => partial(DetachPath::None, 2)?,
        _ => {
            let mut a = partial(DetachPath::Z, 2)?;
            // the single shared z~ keeps the plain weights
            let b = partial(DetachPath::Y, 1)?;
            for (g, v) in a.iter_mut() {
                v.iter_mut().zip(&b[g]).for_each(|(x, y)| *x += y);
            }
            a
        }
    };
    // generative groups: the ordinary importance-weighted gradient
    let generative = bound_gradient(model, x, mode, k, k, lambda, seed, stopped)?;
    for (g, v) in values.iter_mut() {
        if !g.is_inference() {
            v.clone_from(&generative[g]);
        }
    }
    Ok(GradEstimate { values, estimator: EstimatorKind::Dreg, seed, mode, k, l: 1 })
}

/// Doubly reparameterized surrogate: inference parameters receive
/// `sum_i sg(w~_i^2) d ln w_i`, generative parameters the usual
/// `sum_i sg(w~_i) d ln w_i`. Uses the paired-sample bound without
/// `direct_y` and the mixture bound with it. The squared-weight identity
/// requires a posterior density that is continuous in its parameters; the
/// uniform posterior is not, so this estimator is biased here.
pub fn dreg_grad(model: &HierModel, x: &Tensor, k: usize, lambda: f64, seed: u64) -> Result<GradEstimate> {
    dreg_with(model, x, k, lambda, seed, NoiseFamily::Uniform)
}

/// What [`grad_snr`] and [`grad_replicates`] sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub mode: GridMode,
    pub k: usize,
    pub l: usize,
    pub lambda: f64,
}

impl EstimatorConfig {
    pub fn estimate(&self, model: &HierModel, x: &Tensor, seed: u64) -> Result<GradEstimate> {
        match self.kind {
            EstimatorKind::Pathwise => pathwise_grad(model, x, self.mode, self.k, self.l, self.lambda, seed),
            EstimatorKind::Dreg => dreg_grad(model, x, self.k, self.lambda, seed),
            EstimatorKind::StlDecomposed => {
                let (a, b) = stl_terms(model, x, self.lambda, seed)?;
                a.plus(&b)
            }
            EstimatorKind::ScoreFunction => Ok(stl_terms(model, x, self.lambda, seed)?.1),
        }
    }
}

/// `n` independent estimates, evaluated in parallel and returned in
/// replicate order.
pub fn grad_replicates(
    model: &HierModel,
    x: &Tensor,
    cfg: &EstimatorConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<GradEstimate>> {
    (0..n).into_par_iter().map(|r| cfg.estimate(model, x, replicate_seed(seed, r))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Early,
    Mid,
    Late,
}

impl StageTag {
    pub const ALL: [StageTag; 3] = [StageTag::Early, StageTag::Mid, StageTag::Late];

    pub fn name(self) -> &'static str {
        match self {
            Self::Early => "early",
            Self::Mid => "mid",
            Self::Late => "late",
        }
    }

    /// Fraction of total training steps at which the tag is sampled.
    pub fn fraction(self) -> f64 {
        match self {
            Self::Early => 0.025,
            Self::Mid => 0.25,
            Self::Late => 0.5,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::Config(format!("unknown stage tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupSnr {
    pub group: Group,
    /// Mean per-parameter SNR over the non-degenerate parameters, or over
    /// all parameters (with the floored std) if every one is degenerate.
    pub snr: f64,
    pub params: usize,
    /// Parameters whose std fell below [`SNR_STD_FLOOR`].
    pub degenerate_params: usize,
}

impl GroupSnr {
    pub fn is_degenerate(&self) -> bool {
        self.params > 0 && self.degenerate_params == self.params
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnrTable {
    pub groups: Vec<GroupSnr>,
    pub n_replicates: usize,
    pub stage: StageTag,
    pub seed: u64,
}

impl SnrTable {
    pub fn get(&self, g: Group) -> Option<&GroupSnr> {
        self.groups.iter().find(|s| s.group == g)
    }

    pub const CSV_HEADER: &'static str = "group,statistic,value,seed,stage";

    /// Rows without header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let (name, seed, stage) = (g.group.name(), self.seed, self.stage.name());
            let _ = writeln!(s, "{name},snr,{:e},{seed},{stage}", g.snr);
            let _ = writeln!(s, "{name},params,{},{seed},{stage}", g.params);
            let _ = writeln!(s, "{name},degenerate_params,{},{seed},{stage}", g.degenerate_params);
            let _ = writeln!(s, "{name},n_replicates,{},{seed},{stage}", self.n_replicates);
        }
        s
    }
}

/// Per-group SNR from replicated per-group gradient vectors.
pub fn snr_from_samples(samples: &[BTreeMap<Group, Vec<f64>>], stage: StageTag, seed: u64) -> Result<SnrTable> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::contract("SNR needs at least two replicates"));
    }
    let mut groups = Vec::new();
    for (g, first) in &samples[0] {
        let dim = first.len();
        if samples.iter().any(|s| s.get(g).map(Vec::len) != Some(dim)) {
            return Err(Error::Shape(format!("replicates disagree on the layout of {g}")));
        }
        let (mut live, mut all, mut degenerate) = (Vec::new(), Vec::with_capacity(dim), 0);
        let mut column = vec![0.0; n];
        for p in 0..dim {
            for (c, s) in column.iter_mut().zip(samples) {
                *c = s[g][p];
            }
            let mean = pairwise_sum(&column) / n as f64;
            let dev: Vec<f64> = column.iter().map(|v| (v - mean) * (v - mean)).collect();
            let std = (pairwise_sum(&dev) / (n - 1) as f64).sqrt();
            let snr = mean.abs() / std.max(SNR_STD_FLOOR);
            all.push(snr);
            if std < SNR_STD_FLOOR {
                degenerate += 1;
            } else {
                live.push(snr);
            }
        }
        let pool = if live.is_empty() { &all } else { &live };
        let snr = if pool.is_empty() { 0.0 } else { pairwise_sum(pool) / pool.len() as f64 };
        groups.push(GroupSnr { group: *g, snr, params: dim, degenerate_params: degenerate });
    }
    Ok(SnrTable { groups, n_replicates: n, stage, seed })
}

/// Gradient SNR of an estimator over `n_replicates` independent seeds.
pub fn grad_snr(
    model: &HierModel,
    x: &Tensor,
    cfg: &EstimatorConfig,
    n_replicates: usize,
    stage: StageTag,
    seed: u64,
) -> Result<SnrTable> {
    if n_replicates < 30 {
        return Err(Error::contract(format!("SNR needs at least 30 replicates, got {n_replicates}")));
    }
    let reps = grad_replicates(model, x, cfg, n_replicates, seed)?;
    let samples: Vec<_> = reps.into_iter().map(|r| r.values).collect();
    snr_from_samples(&samples, stage, seed)
}

/// Estimators under a Gaussian posterior `N(mean, std^2)` in place of the
/// uniform one. Only for checking the estimators where the posterior
/// density is smooth in its parameters; nothing in training or coding
/// uses it.
pub mod diagnostic {
    use super::*;

    /// Matches the variance of the unit-width uniform.
    pub const DEFAULT_STD: f64 = 0.288_675_134_594_812_9;

    fn family(std: f64) -> NoiseFamily {
        NoiseFamily::Gaussian { std, stop_q_params: false }
    }

    /// Full reparameterized gradient, posterior density included.
    #[allow(clippy::too_many_arguments)]
    pub fn pathwise_grad(
        model: &HierModel,
        x: &Tensor,
        mode: GridMode,
        k: usize,
        l: usize,
        lambda: f64,
        seed: u64,
        std: f64,
    ) -> Result<GradEstimate> {
        let values = bound_gradient(model, x, mode, k, l, lambda, seed, family(std))?;
        Ok(GradEstimate { values, estimator: EstimatorKind::Pathwise, seed, mode, k, l })
    }

    pub fn stl_terms(
        model: &HierModel,
        x: &Tensor,
        lambda: f64,
        seed: u64,
        std: f64,
    ) -> Result<(GradEstimate, GradEstimate)> {
        stl_with(model, x, lambda, seed, family(std))
    }

    pub fn dreg_grad(
        model: &HierModel,
        x: &Tensor,
        k: usize,
        lambda: f64,
        seed: u64,
        std: f64,
    ) -> Result<GradEstimate> {
        dreg_with(model, x, k, lambda, seed, family(std))
    }

    /// `ln q` of the samples the Gaussian family draws for `seed`, for
    /// checking the sampler against the closed form.
    pub fn log_q_of_samples(model: &HierModel, x: &Tensor, lambda: f64, seed: u64, std: f64) -> Result<f64> {
        let tape = Tape::no_grad();
        let bm = model.bind(&tape);
        let xv = tape.constant(x.clone());
        let opts = GridOptions { family: family(std), detach: DetachPath::None };
        let g = build_grid(&bm, &xv, GridMode::Elbo, 1, 1, lambda, noise_key(seed), opts)?;
        let (qy, qz) = (g.log_qy.expect("gaussian family"), g.log_qz.expect("gaussian family"));
        Ok(qy.value().sum() + qz.value().sum())
    }
}
