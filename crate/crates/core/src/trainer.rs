//! Adam updates, the learning-rate schedule and the training loop.
//!
//! A run is a pure function of its configuration, the initial model and
//! the dataset: batch order and posterior noise for step `s` are derived
//! from `(seed, s)`, so resuming from a checkpoint continues the exact
//! trajectory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{grad_snr, noise_key, replicate_seed, EstimatorConfig, EstimatorKind, SnrTable, StageTag};
use crate::model::{build_grid, read_container, write_container, Container, GridMode, GridOptions, HierModel};
use crate::objectives::{evaluate_grid, surrogate_loss, SurrogateStyle};
use crate::tensor::{SeededRng, Tape, Tensor};

/// Consecutive non-finite steps that abort a run.
pub const DIVERGENCE_PATIENCE: usize = 10;

fn d_lr() -> f64 {
    1e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.95
}
fn d_eps() -> f64 {
    1e-8
}
fn d_warm() -> f64 {
    0.1
}
fn d_floor() -> f64 {
    0.1
}
fn d_batch() -> usize {
    8
}
fn d_true() -> bool {
    true
}
fn d_snr_reps() -> usize {
    100
}
fn d_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub mode: GridMode,
    #[serde(default = "d_one")]
    pub k: usize,
    #[serde(default = "d_one")]
    pub l: usize,
    #[serde(default)]
    pub surrogate_style: SurrogateStyle,
    #[serde(default = "d_lr")]
    pub lr_base: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    /// Adam denominator stabilizer.
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_one")]
    pub epochs: usize,
    /// Caps the run length; `None` trains for `epochs` full passes.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Fraction of the run over which the cosine decay happens.
    #[serde(default = "d_warm")]
    pub warm_fraction: f64,
    /// Learning rate after the decay, as a fraction of the start value.
    #[serde(default = "d_floor")]
    pub lr_floor_fraction: f64,
    /// Multiply the learning rate by the number of samples per image.
    #[serde(default = "d_true")]
    pub scale_lr_with_samples: bool,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Replicates per SNR snapshot; 0 disables the snapshots.
    #[serde(default = "d_snr_reps")]
    pub snr_replicates: usize,
}

impl TrainConfig {
    pub fn new(lambda: f64, mode: GridMode) -> Self {
        Self {
            lambda,
            mode,
            k: 1,
            l: 1,
            surrogate_style: SurrogateStyle::default(),
            lr_base: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            adam_eps: d_eps(),
            epochs: 1,
            max_steps: None,
            warm_fraction: d_warm(),
            lr_floor_fraction: d_floor(),
            scale_lr_with_samples: true,
            batch_size: d_batch(),
            seed: 0,
            clip_norm: None,
            checkpoint_every: 0,
            snr_replicates: d_snr_reps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(0.0..=1.0).contains(&self.warm_fraction) {
            return bad("warm_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lr_floor_fraction) {
            return bad("lr_floor_fraction must lie in [0, 1]");
        }
        if self.k == 0 || self.l == 0 || self.batch_size == 0 {
            return bad("k, l and batch_size must be positive");
        }
        if !(self.lr_base > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("lr_base must be positive and betas in [0, 1)");
        }
        if self.snr_replicates != 0 && self.snr_replicates < 30 {
            return bad("snr_replicates must be 0 or at least 30");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Samples per image: `1`, `k`, or `k * l` for `dms`.
    pub fn sample_scale(&self) -> f64 {
        match self.mode {
            GridMode::Elbo => 1.0,
            GridMode::Iwae | GridMode::Mix => self.k as f64,
            GridMode::Dms => (self.k * self.l) as f64,
        }
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        let per_epoch = (dataset_len / self.batch_size).max(1);
        self.max_steps.unwrap_or(self.epochs * per_epoch)
    }
}

/// Cosine decay from `base * scale` to `floor * base * scale` over the
/// first `warm_fraction` of the run, constant afterwards.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let start = cfg.lr_base * if cfg.scale_lr_with_samples { cfg.sample_scale() } else { 1.0 };
    let end = (cfg.warm_fraction * total_steps as f64).round() as usize;
    let floor = cfg.lr_floor_fraction;
    if step >= end {
        return start * floor;
    }
    let c = 0.5 * (1.0 + (PI * step as f64 / end as f64).cos());
    start * (floor + (1.0 - floor) * c)
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Applied updates.
    pub t: u64,
    /// Updates refused because a gradient was not finite.
    pub rejected: u64,
}

impl AdamState {
    pub fn new(model: &HierModel) -> Self {
        let zeros: BTreeMap<_, _> = model.params().iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, rejected: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Rejected,
}

/// One bias-corrected Adam update. `grads` is the gradient of the loss
/// being minimized and must name every parameter.
pub fn adam_step(
    model: &mut HierModel,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    for (name, p) in model.params() {
        match grads.get(name) {
            Some(g) if g.shape() == p.shape() => {}
            Some(_) => return Err(Error::Shape(format!("gradient of {name} has the wrong shape"))),
            None => return Err(Error::contract(format!("no gradient for {name}"))),
        }
    }
    if grads.values().any(|g| !g.all_finite()) {
        state.rejected += 1;
        return Ok(StepOutcome::Rejected);
    }
    let clip = match cfg.clip_norm {
        Some(c) => {
            let norm = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in model.params_mut().iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("state built from the same model");
        let v = state.v.get_mut(name).expect("state built from the same model");
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i] * clip;
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(StepOutcome::Applied)
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub mode: GridMode,
    pub k: usize,
    pub l: usize,
    pub lambda: f64,
    /// Surrogate loss in bits per pixel.
    pub loss: f64,
    pub bpp_est: f64,
    pub mse: f64,
    pub lr: f64,
    pub seed: u64,
}

pub const METRIC_HEADER: &str = "step,mode,k,l,lambda,loss,bpp_est,mse,lr,seed";
pub const EPOCH_HEADER: &str = "epoch,steps,loss,bpp_est,mse,rd_cost";
pub const SNR_HEADER: &str = "group,statistic,value,seed,stage";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, self.mode, self.k, self.l, self.lambda, self.loss, self.bpp_est, self.mse, self.lr, self.seed
        )
    }
}

/// Stacks `[C, H, W]` images into a batch.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("empty batch"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || images.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(Error::Shape("batch images must share one [C, H, W] shape".into()));
    }
    let mut data = Vec::with_capacity(images.len() * first.len());
    for t in images {
        data.extend_from_slice(t.data());
    }
    Tensor::new([&[images.len()][..], &shape].concat(), data)
}

/// Image indices of `step`'s batch: a fresh seeded permutation per
/// epoch, dropping the ragged tail.
fn batch_indices(step: usize, n: usize, cfg: &TrainConfig) -> Vec<usize> {
    let b = cfg.batch_size.min(n);
    let per_epoch = (n / b).max(1);
    let (epoch, slot) = (step / per_epoch, step % per_epoch);
    let mut rng = SeededRng::new(cfg.seed, 0x0EC0_0000 + epoch as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm[slot * b..slot * b + b].to_vec()
}

/// Single-sample rate-distortion cost (bits per pixel plus weighted MSE)
/// over the whole dataset, with noise fixed by `seed`.
pub fn rd_cost_on(model: &HierModel, data: &[Tensor], lambda: f64, batch: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, chunk) in data.chunks(batch.max(1)).enumerate() {
        let tape = Tape::no_grad();
        let bm = model.bind(&tape);
        let x = tape.constant(stack(&chunk.iter().collect::<Vec<_>>())?);
        let grid = build_grid(
            &bm,
            &x,
            GridMode::Elbo,
            1,
            1,
            lambda,
            noise_key(replicate_seed(seed, i)),
            GridOptions::default(),
        )?;
        let e = evaluate_grid(grid)?;
        total += e.report.rd_cost() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: HierModel,
    pub adam: AdamState,
    /// Next step to run.
    pub step: usize,
    /// Consecutive non-finite steps so far.
    pub nan_streak: usize,
}

impl TrainState {
    pub fn new(model: HierModel) -> Self {
        let adam = AdamState::new(&model);
        Self { model, adam, step: 0, nan_streak: 0 }
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "train_state",
            "arch": self.model.arch(),
            "direct_y": self.model.direct_y(),
            "step": self.step,
            "nan_streak": self.nan_streak,
            "adam_t": self.adam.t,
            "adam_rejected": self.adam.rejected,
            "config": cfg,
        });
        let mut tensors: Vec<(String, Tensor)> =
            self.model.params().iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        tensors.extend(self.adam.m.iter().map(|(n, t)| (format!("adam_m/{n}"), t.clone())));
        tensors.extend(self.adam.v.iter().map(|(n, t)| (format!("adam_v/{n}"), t.clone())));
        write_container(path, &Container { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        let bad = |d: &str| Error::Format { what: "training checkpoint", detail: d.to_string() };
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some("train_state") {
            return Err(bad("not a training state"));
        }
        let num = |k: &str| c.meta.get(k).and_then(|v| v.as_u64()).ok_or_else(|| bad(k));
        let (step, streak, t, rejected) = (num("step")?, num("nan_streak")?, num("adam_t")?, num("adam_rejected")?);
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (n, t) in &c.tensors {
            if let Some(p) = n.strip_prefix("adam_m/") {
                m.insert(p.to_string(), t.clone());
            } else if let Some(p) = n.strip_prefix("adam_v/") {
                v.insert(p.to_string(), t.clone());
            }
        }
        let model = HierModel::from_container(c)?;
        if m.len() != model.params().len() || v.len() != model.params().len() {
            return Err(bad("optimizer moments do not match the parameters"));
        }
        Ok(Self { model, adam: AdamState { m, v, t, rejected }, step: step as usize, nan_streak: streak as usize })
    }
}

/// Where a run writes its logs. With `dir == None` nothing touches disk.
#[derive(Clone, Debug, Default)]
pub struct RunSink {
    pub dir: Option<PathBuf>,
}

impl RunSink {
    fn append(&self, file: &str, header: &str, body: &str) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(file);
        let fresh = !path.exists();
        let mut f =
            std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let mut s = String::new();
        if fresh {
            s.push_str(header);
            s.push('\n');
        }
        s.push_str(body);
        f.write_all(s.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&self, state: &TrainState, cfg: &TrainConfig, name: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        let path = ck.join(name);
        state.save(&path, cfg)?;
        Ok(Some(path))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
    pub snr: Vec<SnrTable>,
    pub total_steps: usize,
}

/// Runs from `state.step` to the end of the schedule, or for at most
/// `stop_after` further steps.
pub fn train_from(
    cfg: &TrainConfig,
    mut state: TrainState,
    data: &[Tensor],
    sink: &RunSink,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training needs at least one image"));
    }
    let total = cfg.total_steps(data.len());
    let end = stop_after.map_or(total, |n| (state.step + n).min(total));
    let snr_steps: Vec<(usize, StageTag)> = if cfg.snr_replicates > 0 {
        StageTag::ALL
            .iter()
            .map(|&t| (((t.fraction() * total as f64).round() as usize).min(total.saturating_sub(1)), t))
            .collect()
    } else {
        Vec::new()
    };
    let per_epoch = (data.len() / cfg.batch_size.min(data.len())).max(1);
    let mut metrics = Vec::new();
    let mut snr = Vec::new();
    let mut epoch_acc: Vec<MetricRow> = Vec::new();

    while state.step < end {
        let step = state.step;
        let idx = batch_indices(step, data.len(), cfg);
        let x = stack(&idx.iter().map(|&i| &data[i]).collect::<Vec<_>>())?;

        for &(at, tag) in &snr_steps {
            if at == step {
                let est = EstimatorConfig {
                    kind: EstimatorKind::Pathwise,
                    mode: cfg.mode,
                    k: cfg.k,
                    l: cfg.l,
                    lambda: cfg.lambda,
                };
                let table = grad_snr(
                    &state.model,
                    &x,
                    &est,
                    cfg.snr_replicates,
                    tag,
                    replicate_seed(cfg.seed ^ 0x5_4E52, step),
                )?;
                sink.append("snr.csv", SNR_HEADER, &table.csv_rows())?;
                snr.push(table);
            }
        }

        let lr = lr_schedule(step, total, cfg);
        let tape = Tape::new();
        let bm = state.model.bind(&tape);
        let xv = tape.constant(x);
        let key = noise_key(replicate_seed(cfg.seed, step));
        let grid = build_grid(&bm, &xv, cfg.mode, cfg.k, cfg.l, cfg.lambda, key, GridOptions::default())?;
        let eval = evaluate_grid(grid)?;
        let loss = surrogate_loss(&eval, cfg.surrogate_style)?;
        let loss_value = loss.item();
        let outcome = match tape.backprop(&loss) {
            Ok(g) if loss_value.is_finite() => adam_step(&mut state.model, &g.into_params(), &mut state.adam, lr, cfg)?,
            Ok(_) | Err(Error::Numeric { .. }) => {
                state.adam.rejected += 1;
                StepOutcome::Rejected
            }
            Err(e) => return Err(e),
        };
        let row = MetricRow {
            step,
            mode: cfg.mode,
            k: cfg.k,
            l: cfg.l,
            lambda: cfg.lambda,
            loss: loss_value,
            bpp_est: eval.report.bpp(),
            mse: eval.report.mse_255,
            lr,
            seed: cfg.seed,
        };
        sink.append("metrics.csv", METRIC_HEADER, &format!("{}\n", row.csv()))?;
        metrics.push(row.clone());
        epoch_acc.push(row);
        state.step += 1;

        if outcome == StepOutcome::Rejected {
            state.nan_streak += 1;
            if state.nan_streak >= DIVERGENCE_PATIENCE {
                let detail = dump_divergence(sink, &state, &metrics)?;
                return Err(Error::Diverged { step, detail });
            }
        } else {
            state.nan_streak = 0;
        }

        if state.step.is_multiple_of(per_epoch) || state.step == total {
            let n = epoch_acc.len() as f64;
            let mean = |f: fn(&MetricRow) -> f64| epoch_acc.iter().map(f).sum::<f64>() / n;
            let (bpp, mse) = (mean(|r| r.bpp_est), mean(|r| r.mse));
            let line = format!(
                "{},{},{},{},{},{}\n",
                (state.step - 1) / per_epoch,
                epoch_acc.len(),
                mean(|r| r.loss),
                bpp,
                mse,
                bpp + cfg.lambda * mse
            );
            sink.append("epochs.csv", EPOCH_HEADER, &line)?;
            epoch_acc.clear();
        }
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
            sink.checkpoint(&state, cfg, &format!("step_{:08}.ckpt", state.step))?;
        }
    }
    sink.checkpoint(&state, cfg, "last.ckpt")?;
    Ok(TrainOutcome { state, metrics, snr, total_steps: total })
}

/// A fresh run.
pub fn train(cfg: &TrainConfig, model: HierModel, data: &[Tensor], sink: &RunSink) -> Result<TrainOutcome> {
    train_from(cfg, TrainState::new(model), data, sink, None)
}

fn dump_divergence(sink: &RunSink, state: &TrainState, metrics: &[MetricRow]) -> Result<String> {
    let tail: Vec<String> = metrics.iter().rev().take(DIVERGENCE_PATIENCE).rev().map(MetricRow::csv).collect();
    let mut msg = format!("{} consecutive non-finite steps", state.nan_streak);
    if let Some(dir) = &sink.dir {
        let path = dir.join("divergence.json");
        let body = serde_json::json!({
            "step": state.step,
            "rejected_total": state.adam.rejected,
            "last_rows": tail,
            "model_fingerprint": state.model.fingerprint(),
        });
        std::fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&path, e))?;
        let _ = write!(msg, "; dump at {}", path.display());
    }
    Ok(msg)
}
