//! Run directories and the experiment commands behind the CLI.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{
    bd_metrics, bound_ordering_report, ks_uniform_distance, latent_stats, BoundOrderingReport, Histogram, RDCurve,
};
use crate::codec::{evaluate_rd_set, quantization_error, QuantMode, RDPoint, RdSummary};
use crate::error::{Error, Result};
use crate::estimators::{grad_snr, uniform_score_gradient_demo, EstimatorConfig, TestFn};
use crate::harness::config::{ExperimentConfig, SweepAxis};
use crate::harness::presets;
use crate::model::{GridMode, HierModel};
use crate::oracles::fixtures;
use crate::tensor::Tensor;
use crate::trainer::{rd_cost_on, stack, train_from, RunSink, TrainState};

pub const MANIFEST_VERSION: u32 = 1;
pub const RD_HEADER: &str = "image,lambda,quant_mode,bpp_estimated,bpp_actual,bpp_continuous,mse_255,psnr_db,rd_cost";
pub const CURVE_HEADER: &str = "label,lambda,mode,k,l,quant_mode,bpp_estimated,bpp_actual,mse_255,psnr_db,rd_cost";
pub const STATS_HEADER: &str = "level,dims,mean_variance,mean_cov";
/// Replicates used by `snr` when the config leaves `snr_replicates` at 0.
pub const DEFAULT_SNR_REPLICATES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "command")]
pub enum Command {
    Train,
    EvalRd,
    Sweep,
    Snr,
    BoundsCheck { micro: bool, k: Vec<usize>, l: Vec<usize>, replicates: usize },
    Bd { anchor: PathBuf, test: PathBuf },
    Stats,
    DemoGradients { f: TestFn, theta: f64, n: usize },
    UqCompare,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::EvalRd => "eval-rd",
            Self::Sweep => "sweep",
            Self::Snr => "snr",
            Self::BoundsCheck { .. } => "bounds-check",
            Self::Bd { .. } => "bd",
            Self::Stats => "stats",
            Self::DemoGradients { .. } => "demo-gradients",
            Self::UqCompare => "uq-compare",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    /// Without one, results only go to the returned report.
    pub output_dir: Option<PathBuf>,
    /// Replaces the config `seed`.
    pub seed: Option<u64>,
    /// `key=value` pairs applied over the config file.
    pub overrides: Vec<String>,
    pub resume: bool,
}

impl ExperimentSpec {
    pub fn new(command: Command) -> Self {
        Self { command, config_path: None, output_dir: None, seed: None, overrides: Vec::new(), resume: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    /// A hard check of the command failed, or the command could not run.
    Failed = 1,
    Config = 2,
    NumericAbort = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub status: ExitStatus,
    /// Human-readable result lines.
    pub lines: Vec<String>,
    pub summary: Value,
    /// Failed hard checks, or the error that stopped the run.
    pub failures: Vec<String>,
    /// Diagnostic dump written on a numeric abort.
    pub dump: Option<PathBuf>,
}

/// What a command hands back before it is turned into a [`RunOutcome`].
#[derive(Default)]
struct Report {
    lines: Vec<String>,
    summary: Value,
    failures: Vec<String>,
}

/// An output directory owned by this process until dropped.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    pid_file: PathBuf,
}

const PID_FILE: &str = ".msnic.pid";

fn pid_alive(pid: u32) -> bool {
    Path::new("/proc").join(pid.to_string()).exists()
}

impl RunDir {
    /// Creates `path`, or takes it over if it is empty. With `resume` an
    /// existing run is continued instead.
    pub fn open(path: &Path, resume: bool) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let pid_file = path.join(PID_FILE);
        if let Ok(text) = std::fs::read_to_string(&pid_file) {
            if let Ok(pid) = text.trim().parse::<u32>() {
                if pid != std::process::id() && pid_alive(pid) {
                    return Err(Error::Config(format!("{} is in use by process {pid}", path.display())));
                }
            }
            let _ = std::fs::remove_file(&pid_file);
        }
        let occupied = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?.next().is_some();
        if occupied && !resume {
            return Err(Error::Config(format!(
                "output_dir {} is not empty; pass --resume to continue it",
                path.display()
            )));
        }
        std::fs::write(&pid_file, std::process::id().to_string()).map_err(|e| Error::io(&pid_file, e))?;
        Ok(Self { path: path.to_path_buf(), pid_file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.file(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_csv(&self, name: &str, header: &str, rows: &[String]) -> Result<PathBuf> {
        let path = self.file(name);
        let mut text = String::with_capacity(64 * (rows.len() + 1));
        text.push_str(header);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn write_manifest(&self, spec: &ExperimentSpec, cfg: &ExperimentConfig) -> Result<()> {
        let path = self.file("manifest.json");
        if spec.resume && path.exists() {
            let old: Value = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
            let (old_cmd, old_hash) = (old["command"].as_str(), old["config_hash"].as_str());
            if old_cmd != Some(spec.command.name()) || old_hash != Some(cfg.hash().as_str()) {
                return Err(Error::Config(format!(
                    "cannot resume: {} was written by {} with config {}",
                    self.path.display(),
                    old_cmd.unwrap_or("?"),
                    old_hash.unwrap_or("?")
                )));
            }
        }
        let started = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let manifest = json!({
            "manifest_version": MANIFEST_VERSION,
            "command": spec.command.name(),
            "args": spec.command,
            "config_hash": cfg.hash(),
            "code_version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "resumed": spec.resume,
            "started_unix": started,
            "config": cfg,
        });
        self.write_json("manifest.json", &manifest).map(|_| ())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.pid_file);
    }
}

/// Sizes the global thread pool from `MSNIC_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MSNIC_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("MSNIC_THREADS: {v:?} is not a count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("MSNIC_THREADS: {e}")))
}

fn status_of(e: &Error) -> ExitStatus {
    match e {
        Error::Config(_) => ExitStatus::Config,
        Error::Numeric { .. } | Error::Diverged { .. } => ExitStatus::NumericAbort,
        _ => ExitStatus::Failed,
    }
}

fn failed(e: Error, dump: Option<PathBuf>) -> RunOutcome {
    RunOutcome { status: status_of(&e), lines: Vec::new(), summary: Value::Null, failures: vec![e.to_string()], dump }
}

pub fn run(spec: &ExperimentSpec) -> RunOutcome {
    let cfg = match ExperimentConfig::load(spec.config_path.as_deref(), &spec.overrides) {
        Ok(mut c) => {
            if let Some(s) = spec.seed {
                c.seed = s;
            }
            c
        }
        Err(e) => return failed(e, None),
    };
    let dir = match spec.output_dir.as_deref().map(|p| RunDir::open(p, spec.resume)).transpose() {
        Ok(d) => d,
        Err(e) => return failed(e, None),
    };
    if let Some(d) = &dir {
        if let Err(e) = d.write_manifest(spec, &cfg) {
            return failed(e, None);
        }
    }

    match dispatch(spec, &cfg, dir.as_ref()) {
        Ok(report) => {
            let status = if report.failures.is_empty() { ExitStatus::Ok } else { ExitStatus::Failed };
            if let Some(d) = &dir {
                let body = json!({ "command": spec.command.name(), "passed": status == ExitStatus::Ok,
                    "failures": report.failures, "result": report.summary });
                if let Err(e) = d.write_json("summary.json", &body) {
                    return failed(e, None);
                }
            }
            RunOutcome { status, lines: report.lines, summary: report.summary, failures: report.failures, dump: None }
        }
        Err(e) => {
            let mut dump = None;
            if status_of(&e) == ExitStatus::NumericAbort {
                if let Some(d) = &dir {
                    let div = d.file("divergence.json");
                    dump = Some(if div.exists() {
                        div
                    } else {
                        d.write_json("abort.json", &json!({ "command": spec.command.name(), "error": e.to_string() }))
                            .unwrap_or(div)
                    });
                }
            }
            failed(e, dump)
        }
    }
}

fn dispatch(spec: &ExperimentSpec, cfg: &ExperimentConfig, dir: Option<&RunDir>) -> Result<Report> {
    match &spec.command {
        Command::Train => train_cmd(cfg, dir, spec.resume),
        Command::EvalRd => eval_rd_cmd(cfg, dir),
        Command::Sweep => sweep_cmd(cfg, dir),
        Command::Snr => snr_cmd(cfg, dir),
        Command::BoundsCheck { micro, k, l, replicates } => bounds_cmd(cfg, dir, *micro, k, l, *replicates),
        Command::Bd { anchor, test } => bd_cmd(dir, anchor, test),
        Command::Stats => stats_cmd(cfg, dir),
        Command::DemoGradients { f, theta, n } => demo_cmd(cfg, *f, *theta, *n),
        Command::UqCompare => uq_cmd(cfg, dir),
    }
}

/// Newest training state under `dir/checkpoints`, by step.
fn latest_state(dir: &RunDir) -> Result<Option<TrainState>> {
    let ck = dir.file("checkpoints");
    let Ok(entries) = std::fs::read_dir(&ck) else { return Ok(None) };
    let mut best: Option<TrainState> = None;
    for e in entries {
        let path = e.map_err(|e| Error::io(&ck, e))?.path();
        if path.extension().is_some_and(|x| x == "ckpt") {
            let s = TrainState::load(&path)?;
            if best.as_ref().is_none_or(|b| s.step > b.step) {
                best = Some(s);
            }
        }
    }
    Ok(best)
}

struct Trained {
    model: HierModel,
    steps: usize,
    rd_init: f64,
    rd_final: f64,
    rejected: u64,
}

fn train_model(cfg: &ExperimentConfig, sink_dir: Option<PathBuf>, resume_from: Option<TrainState>) -> Result<Trained> {
    let data = cfg.dataset().materialize()?;
    let tc = cfg.train_config();
    let fresh = cfg.model()?;
    let rd_init = rd_cost_on(&fresh, &data.images, tc.lambda, tc.batch_size, tc.seed)?;
    let state = resume_from.unwrap_or_else(|| TrainState::new(fresh));
    let out = train_from(&tc, state, &data.images, &RunSink { dir: sink_dir }, None)?;
    let rd_final = rd_cost_on(&out.state.model, &data.images, tc.lambda, tc.batch_size, tc.seed)?;
    Ok(Trained { steps: out.state.step, rejected: out.state.adam.rejected, model: out.state.model, rd_init, rd_final })
}

fn train_cmd(cfg: &ExperimentConfig, dir: Option<&RunDir>, resume: bool) -> Result<Report> {
    let resume_from = match (dir, resume) {
        (Some(d), true) => latest_state(d)?,
        _ => None,
    };
    let t = train_model(cfg, dir.map(|d| d.path().to_path_buf()), resume_from)?;
    if let Some(d) = dir {
        t.model.save(&d.file("model.ckpt"))?;
    }
    Ok(Report {
        lines: vec![format!("trained to step {}: rd_cost {:.6} -> {:.6}", t.steps, t.rd_init, t.rd_final)],
        summary: json!({
            "steps": t.steps,
            "rd_cost_init": t.rd_init,
            "rd_cost_final": t.rd_final,
            "rejected_steps": t.rejected,
            "model_fingerprint": t.model.fingerprint(),
        }),
        failures: Vec::new(),
    })
}

fn rd_rows(s: &RdSummary) -> Vec<String> {
    s.points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            format!(
                "{i},{},{},{},{},{},{},{},{}",
                p.lambda,
                s.mode.name(),
                p.bpp_estimated,
                p.bpp_actual,
                p.bpp_continuous,
                p.mse_255,
                p.psnr_db,
                p.rd_cost
            )
        })
        .collect()
}

/// Payload size bound per image: 2% over the ideal length plus 32 bytes.
pub fn coder_slack_ok(p: &RDPoint, pixels: usize) -> bool {
    p.bpp_actual <= p.bpp_estimated * 1.02 + 32.0 * 8.0 / pixels as f64
}

fn pixels(img: &Tensor) -> usize {
    let s = img.shape();
    s[1] * s[2]
}

fn eval_rd_cmd(cfg: &ExperimentConfig, dir: Option<&RunDir>) -> Result<Report> {
    let model = cfg.model()?;
    let eval = cfg.eval_dataset().materialize()?;
    let s = evaluate_rd_set(&model, &eval.images, cfg.lambda, cfg.quant_mode, cfg.seed)?;
    if let Some(d) = dir {
        d.write_csv("rd.csv", RD_HEADER, &rd_rows(&s))?;
    }
    let failures = s
        .points
        .iter()
        .zip(&eval.images)
        .enumerate()
        .filter(|(_, (p, img))| !coder_slack_ok(p, pixels(img)))
        .map(|(i, (p, _))| {
            format!("image {i}: bpp_actual {} exceeds the coder bound over {}", p.bpp_actual, p.bpp_estimated)
        })
        .collect();
    let m = &s.mean;
    Ok(Report {
        lines: vec![format!(
            "{} images, {}: bpp_est {:.4} bpp_actual {:.4} psnr {:.2} dB rd_cost {:.4}",
            s.points.len(),
            s.mode.name(),
            m.bpp_estimated,
            m.bpp_actual,
            m.psnr_db,
            m.rd_cost
        )],
        summary: serde_json::to_value(&s)?,
        failures,
    })
}

fn sweep_cmd(cfg: &ExperimentConfig, dir: Option<&RunDir>) -> Result<Report> {
    let points: Vec<(String, ExperimentConfig)> = match cfg.sweep {
        SweepAxis::Lambda => cfg
            .lambdas
            .iter()
            .map(|&l| {
                let mut c = cfg.clone();
                c.lambda = l;
                (format!("lambda_{l}"), c)
            })
            .collect(),
        SweepAxis::Samples => {
            if cfg.mode == GridMode::Elbo {
                return Err(Error::Config("sweep = \"samples\" needs mode iwae, mix or dms".into()));
            }
            cfg.sample_sizes
                .iter()
                .map(|&k| {
                    let mut c = cfg.clone();
                    c.k = k;
                    (format!("{}_k{k}", cfg.mode.name()), c)
                })
                .collect()
        }
    };
    let eval = cfg.eval_dataset().materialize()?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut lines = Vec::new();
    for (label, c) in &points {
        let sub = match dir {
            Some(d) => {
                let p = d.file("runs").join(label);
                std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                Some(p)
            }
            None => None,
        };
        let done = sub.as_ref().map(|p| p.join("point.json")).filter(|p| p.exists());
        let point: RDPoint = if let Some(p) = done {
            serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?
        } else {
            let t = train_model(c, sub.clone(), None)?;
            let s = evaluate_rd_set(&t.model, &eval.images, c.lambda, c.quant_mode, c.seed)?;
            if let Some(p) = &sub {
                t.model.save(&p.join("model.ckpt"))?;
                let f = p.join("point.json");
                std::fs::write(&f, serde_json::to_vec_pretty(&s.mean)?).map_err(|e| Error::io(&f, e))?;
            }
            s.mean
        };
        rows.push(format!(
            "{label},{},{},{},{},{},{},{},{},{},{}",
            c.lambda,
            c.mode.name(),
            c.k,
            c.l,
            c.quant_mode.name(),
            point.bpp_estimated,
            point.bpp_actual,
            point.mse_255,
            point.psnr_db,
            point.rd_cost
        ));
        lines.push(format!(
            "{label}: bpp {:.4} psnr {:.2} dB rd_cost {:.4}",
            point.bpp_actual, point.psnr_db, point.rd_cost
        ));
        results.push(json!({ "label": label, "point": point }));
    }
    if let Some(d) = dir {
        d.write_csv("rd_curve.csv", CURVE_HEADER, &rows)?;
    }
    Ok(Report { lines, summary: json!({ "points": results }), failures: Vec::new() })
}

fn first_batch(cfg: &ExperimentConfig) -> Result<Tensor> {
    let data = cfg.dataset().materialize()?;
    let n = cfg.batch_size.min(data.len());
    if n == 0 {
        return Err(Error::contract("dataset is empty"));
    }
    stack(&data.images[..n].iter().collect::<Vec<_>>())
}

fn snr_cmd(cfg: &ExperimentConfig, dir: Option<&RunDir>) -> Result<Report> {
    let model = cfg.model()?;
    let x = first_batch(cfg)?;
    let est = EstimatorConfig { kind: cfg.estimator, mode: cfg.mode, k: cfg.k, l: cfg.l, lambda: cfg.lambda };
    let reps = if cfg.snr_replicates == 0 { DEFAULT_SNR_REPLICATES } else { cfg.snr_replicates };
    let table = grad_snr(&model, &x, &est, reps, cfg.snr_stage, cfg.seed)?;
    if let Some(d) = dir {
        let rows: Vec<String> = table.csv_rows().lines().map(str::to_string).collect();
        d.write_csv("snr.csv", crate::trainer::SNR_HEADER, &rows)?;
    }
    let lines = table
        .groups
        .iter()
        .map(|g| {
            format!("{:<10} snr {:.4} ({} params, {} degenerate)", g.group.name(), g.snr, g.params, g.degenerate_params)
        })
        .collect();
    Ok(Report { lines, summary: serde_json::to_value(&table)?, failures: Vec::new() })
}

fn bounds_table(r: &BoundOrderingReport) -> Vec<String> {
    let mut lines: Vec<String> =
        r.rows.iter().map(|b| format!("{:<12} {:>14.8} +- {:.8}", b.label(), b.mean, b.se)).collect();
    if let Some(e) = r.log_evidence {
        lines.push(format!("{:<12} {:>14.8}", "log p(x)", e));
    }
    lines
}

fn bounds_cmd(
    cfg: &ExperimentConfig,
    dir: Option<&RunDir>,
    micro: bool,
    k: &[usize],
    l: &[usize],
    replicates: usize,
) -> Result<Report> {
    if k.is_empty() || l.is_empty() || k.contains(&0) || l.contains(&0) {
        return Err(Error::Config("k and l need positive values".into()));
    }
    let (model, x, lambda) = if micro {
        (presets::micro_model(cfg.direct_y), Tensor::full(&[1, 1, 1, 1], presets::MICRO_X), presets::MICRO_LAMBDA)
    } else {
        let eval = cfg.eval_dataset().materialize()?;
        let img = eval.images.first().ok_or_else(|| Error::contract("no evaluation image"))?;
        let s = img.shape();
        (cfg.model()?, img.reshape(&[1, s[0], s[1], s[2]])?, cfg.lambda)
    };
    let report = bound_ordering_report(&model, &x, lambda, micro, k, l, replicates, cfg.seed)?;
    if let Some(d) = dir {
        d.write_csv("bounds.csv", BoundOrderingReport::CSV_HEADER, &report.csv_rows())?;
    }
    let failures = report
        .violations
        .iter()
        .map(|v| format!("{} exceeds {} by {:.3e} ({:.1} SE)", v.lower, v.upper, v.mean_gap, v.mean_gap / v.se))
        .collect();
    Ok(Report { lines: bounds_table(&report), summary: serde_json::to_value(&report)?, failures })
}

/// Reads a rate-distortion CSV. The rate comes from `bpp_actual`, `bpp`
/// or `bpp_estimated`, the quality from `psnr_db` or `psnr`, whichever
/// appears first in that order.
pub fn read_rd_csv(path: &Path, label: &str) -> Result<RDCurve> {
    let bad = |d: String| Error::Format { what: "rate-distortion CSV", detail: format!("{}: {d}", path.display()) };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |names: &[&str]| names.iter().find_map(|n| headers.iter().position(|h| h.trim() == *n));
    let rate = col(&["bpp_actual", "bpp", "bpp_estimated"]).ok_or_else(|| bad("no bpp column".into()))?;
    let psnr = col(&["psnr_db", "psnr"]).ok_or_else(|| bad("no psnr column".into()))?;
    let mut pairs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(format!("row {}: column {} is not a number", i + 1, headers.get(j).unwrap_or("?"))))
        };
        pairs.push((num(rate)?, num(psnr)?));
    }
    RDCurve::from_pairs(label, &pairs)
}

fn bd_cmd(dir: Option<&RunDir>, anchor: &Path, test: &Path) -> Result<Report> {
    let a = read_rd_csv(anchor, "anchor")?;
    let t = read_rd_csv(test, "test")?;
    let bd = bd_metrics(&a, &t)?;
    let summary = serde_json::to_value(bd)?;
    if let Some(d) = dir {
        d.write_json("bd.json", &summary)?;
    }
    Ok(Report {
        lines: vec![format!("BD-BR {:.4} %  BD-PSNR {:.4} dB", bd.bd_br_percent, bd.bd_metric)],
        summary,
        failures: Vec::new(),
    })
}

fn stats_cmd(cfg: &ExperimentConfig, dir: Option<&RunDir>) -> Result<Report> {
    let model = cfg.model()?;
    let eval = cfg.eval_dataset().materialize()?;
    let s = latent_stats(&model, &eval.images)?;
    let levels = [("y", &s.y), ("z", &s.z), ("y_rounded", &s.y_rounded), ("z_rounded", &s.z_rounded)];
    let rows: Vec<String> =
        levels.iter().map(|(n, l)| format!("{n},{},{},{}", l.variance.len(), l.mean_variance, l.mean_cov)).collect();
    if let Some(d) = dir {
        d.write_csv("stats.csv", STATS_HEADER, &rows)?;
        for (n, l) in &levels {
            d.write_csv(&format!("hist_{n}.csv"), Histogram::CSV_HEADER, &l.histogram.csv_rows())?;
        }
    }
    let lines =
        levels.iter().map(|(n, l)| format!("{n:<10} variance {:.6} cov {:.4}", l.mean_variance, l.mean_cov)).collect();
    Ok(Report { lines, summary: serde_json::to_value(&s)?, failures: Vec::new() })
}

fn demo_cmd(cfg: &ExperimentConfig, f: TestFn, theta: f64, n: usize) -> Result<Report> {
    let r = uniform_score_gradient_demo(f, theta, n, cfg.seed)?;
    let mut failures = Vec::new();
    if r.score_estimate != 0.0 {
        failures.push(format!("score estimate {} is not exactly zero", r.score_estimate));
    }
    if (r.pathwise_estimate - r.truth).abs() > 3.0 * r.pathwise_se {
        failures.push(format!("pathwise {} is more than 3 SE from {}", r.pathwise_estimate, r.truth));
    }
    Ok(Report {
        lines: vec![format!(
            "score {:.1}, pathwise {:.6} +- {:.6}, truth {}",
            r.score_estimate, r.pathwise_estimate, r.pathwise_se, r.truth
        )],
        summary: serde_json::to_value(r)?,
        failures,
    })
}

pub const ERROR_HIST_BINS: usize = 50;

/// Critical KS distance at significance 0.001 for `n` samples.
pub fn ks_critical(n: usize) -> f64 {
    1.95 / (n as f64).sqrt()
}

fn uq_cmd(cfg: &ExperimentConfig, dir: Option<&RunDir>) -> Result<Report> {
    let (model, trained) = if cfg.checkpoint.is_some() {
        (cfg.model()?, None)
    } else {
        let t = train_model(cfg, dir.map(|d| d.path().to_path_buf()), None)?;
        if let Some(d) = dir {
            t.model.save(&d.file("model.ckpt"))?;
        }
        (t.model, Some((t.rd_init, t.rd_final)))
    };
    let eval = cfg.eval_dataset().materialize()?;
    let round = evaluate_rd_set(&model, &eval.images, cfg.lambda, QuantMode::Round, cfg.seed)?;
    let uq = evaluate_rd_set(&model, &eval.images, cfg.lambda, QuantMode::Uq, cfg.seed)?;
    let (mut errors, mut round_errors) = (Vec::new(), Vec::new());
    for (i, img) in eval.images.iter().enumerate() {
        let seed = crate::tensor::SeededRng::new(cfg.seed, i as u64).next_u64();
        errors.extend(quantization_error(&model, img, QuantMode::Uq, seed)?);
        round_errors.extend(quantization_error(&model, img, QuantMode::Round, seed)?);
    }
    let ks = ks_uniform_distance(&errors);
    let crit = ks_critical(errors.len());
    if let Some(d) = dir {
        let mut rows = rd_rows(&round);
        rows.extend(rd_rows(&uq));
        d.write_csv("rd.csv", RD_HEADER, &rows)?;
        for (name, e) in [("quant_error_round.csv", &round_errors), ("quant_error_uq.csv", &errors)] {
            let h = Histogram::linear(e, -0.5, 0.5, ERROR_HIST_BINS);
            d.write_csv(name, Histogram::CSV_HEADER, &h.csv_rows())?;
        }
    }
    let rounding_wins = round.mean.rd_cost < uq.mean.rd_cost;
    let mut failures = Vec::new();
    if ks > crit {
        failures.push(format!("dithered quantization error fails the uniformity check: KS {ks:.5} > {crit:.5}"));
    }
    let lines = vec![
        format!(
            "round rd_cost {:.4} (bpp {:.4}, psnr {:.2} dB)",
            round.mean.rd_cost, round.mean.bpp_actual, round.mean.psnr_db
        ),
        format!("uq    rd_cost {:.4} (bpp {:.4}, psnr {:.2} dB)", uq.mean.rd_cost, uq.mean.bpp_actual, uq.mean.psnr_db),
        format!("rounding lower: {rounding_wins}"),
        format!("uq error KS distance {ks:.5} over {} values (critical {crit:.5})", errors.len()),
    ];
    Ok(Report {
        lines,
        summary: json!({
            "round": round.mean,
            "uq": uq.mean,
            "rounding_lower_rd_cost": rounding_wins,
            "ks_distance": ks,
            "ks_critical": crit,
            "n_errors": errors.len(),
            "round_error_abs_mean": round_errors.iter().map(|e| e.abs()).sum::<f64>() / round_errors.len().max(1) as f64,
            "uq_error_abs_mean": errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len().max(1) as f64,
            "training_rd_cost": trained,
        }),
        failures,
    })
}

/// Regenerates every registered fixture into `out`, or with `check`
/// compares against the files already there.
pub fn run_fixtures(dir: &Path, check: bool) -> RunOutcome {
    let names: Vec<&str> = fixtures::REGISTRY.iter().map(|(n, _)| *n).collect();
    let result = if check {
        fixtures::check(dir, &names).map(|stale| {
            let lines = vec![format!("{} fixtures checked, {} stale", names.len(), stale.len())];
            let failures = stale.iter().map(|s| format!("{s} differs from a fresh regeneration")).collect();
            Report { lines, summary: json!({ "stale": stale }), failures }
        })
    } else {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).and_then(|_| {
            let all = fixtures::generate_all()?;
            for f in &all {
                fixtures::write(dir, f)?;
            }
            Ok(Report {
                lines: vec![format!("wrote {} fixtures to {}", all.len(), dir.display())],
                summary: json!({ "written": all.len() }),
                failures: Vec::new(),
            })
        })
    };
    match result {
        Ok(r) => RunOutcome {
            status: if r.failures.is_empty() { ExitStatus::Ok } else { ExitStatus::Failed },
            lines: r.lines,
            summary: r.summary,
            failures: r.failures,
            dump: None,
        },
        Err(e) => failed(e, None),
    }
}
