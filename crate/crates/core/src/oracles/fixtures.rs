//! Versioned ground-truth fixture files.
//!
//! Every fixture is produced by [`generate`] from an oracle that does not
//! share code with the implementation under test, except for the
//! `recorded` ones, which pin the outcome of a seeded run. The committed
//! copies live in `crates/core/fixtures/` and are rebuilt with
//! `msnic fixtures --out crates/core/fixtures` (add `--check` to diff
//! instead of writing).

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::micro::{
    expected_log_mean, lambda0_box_closed_form, log_evidence_box, MicroBound, MicroSpec, Noise, ValueGrad, NPARAM,
};
use crate::error::{Error, Result};
use crate::harness::presets;
use crate::model::{GridMode, HierModel, MICRO_PARAM_NAMES};
use crate::quadrature::Rule;
use crate::tensor::SeededRng;

pub const FIXTURE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Quadrature,
    Analytic,
    Exhaustive,
    FiniteDifference,
    /// Outcome of a seeded run of the implementation itself.
    Recorded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceKind {
    Absolute,
    Relative,
    /// Multiples of the Monte-Carlo standard error of the consumer.
    StandardErrors,
    /// The truth is a one-sided limit.
    Bound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub version: u32,
    pub name: String,
    pub method: Method,
    pub inputs: Value,
    pub truth: Value,
    pub tolerance: f64,
    pub tolerance_kind: ToleranceKind,
    pub note: String,
}

impl Fixture {
    pub fn truth_f64(&self, key: &str) -> Result<f64> {
        self.truth.get(key).and_then(Value::as_f64).ok_or_else(|| self.missing(key))
    }

    pub fn truth_vec(&self, key: &str) -> Result<Vec<f64>> {
        self.truth
            .get(key)
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| self.missing(key))
    }

    pub fn input_f64(&self, key: &str) -> Result<f64> {
        self.inputs.get(key).and_then(Value::as_f64).ok_or_else(|| self.missing(key))
    }

    pub fn input_vec(&self, key: &str) -> Result<Vec<f64>> {
        self.inputs
            .get(key)
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| self.missing(key))
    }

    fn missing(&self, key: &str) -> Error {
        Error::Format { what: "fixture", detail: format!("{}: no numeric field {key:?}", self.name) }
    }
}

/// Every fixture with the claim it backs.
pub const REGISTRY: &[(&str, &str)] = &[
    ("tape_gradcheck_tanh_net", "tape gradient of a 3-layer affine+tanh net matches central differences"),
    ("lme_gaussian_64", "log-mean-exp of 64 wide normal samples matches a compensated two-pass sum"),
    ("uniform_posterior_mean", "mean of uniform posterior samples sits within 3 SE of the location"),
    ("gaussian_interval_unit", "log mass of the unit bin of a standard normal"),
    ("normal_support_09999", "central 0.9999 support of a standard normal lies inside [-5, 5]"),
    ("pmf_entropy_sigma2", "entropy of the integer bins of a sigma 2 normal"),
    ("affine_lowpass_smoke", "identity-like affine model lowers reconstruction MSE in 200 steps"),
    ("iwae_k4_k16_micro", "expected IWAE bound grows from k 4 to k 16 on the micro model"),
    ("mix_k2_k8_micro", "expected MIX bound grows from k 2 to k 8 on the micro model"),
    ("mix_below_evidence_micro", "expected MIX bounds stay below the micro log evidence"),
    ("dms_above_mix_micro", "DMS replicate means sit above MIX at equal k"),
    ("joint_surrogate_identity", "joint surrogate gradient equals the bound gradient"),
    ("per_term_vs_joint_k8", "per-term and joint surrogate gradients differ at k 8"),
    ("elbo_grad_micro", "expected ELBO gradient on the micro model"),
    ("iwae_k8_grad_micro", "expected IWAE k 8 gradient on the micro model"),
    ("gaussian_score_zero_mean", "score term under a Gaussian posterior has zero mean"),
    ("demo_square_theta_1p5", "uniform demo, square at 1.5"),
    ("demo_cube_theta_2", "uniform demo, cube at 2"),
    ("dreg_uniform_k8_micro", "expected k 8 gradients under uniform noise, DReG bias target"),
    ("dreg_gaussian_k8_micro", "expected k 8 gradients under Gaussian noise, DReG control"),
    ("snr_injected_normal", "SNR of injected N(3, 1) gradients"),
    ("adam_first_step", "first bias-corrected Adam step on a unit gradient"),
    ("smoke_rd_decrease", "200-step toy run lowers the rate-distortion cost"),
    ("uq_error_uniform", "dithered quantization error is uniform"),
    ("coder_uniform_256", "uniform 256-symbol stream of 4096 symbols"),
    ("coder_overhead_toy", "coded rate stays within the overhead bound on 20 toy images"),
    ("bd_rate_shift_1p10", "BD rate of a curve with rates scaled by 1.10"),
    ("bd_psnr_shift_0p5", "BD PSNR of a curve shifted up by 0.5 dB"),
    ("latent_normal_moments", "variance and Cov of N(2, 3) latents"),
    ("micro_bounds_monotone_k", "MIX and DMS means rise with k on the micro model"),
    ("micro_dms_rows_vs_mix", "every DMS row sits above the MIX row of equal k"),
    ("cli_bounds_check_micro", "bounds-check defaults on the micro model"),
    ("cli_demo_cube", "demo-gradients cube at 2"),
    ("checkerboard_rate_smoke", "period-2 checkerboard rate falls below its random-init rate"),
    ("evidence_lambda0_closed_form", "box evidence at zero trade-off equals its closed form"),
    ("evidence_grad_fd", "box evidence gradient matches central differences"),
    ("uniform_moment_square_1p5", "E[d/dtheta (theta+e)^2] at 1.5"),
    ("uniform_moment_cube_0", "E[d/dtheta (theta+e)^3] at 0"),
    ("uniform_moment_sin_0", "E[d/dtheta sin(theta+e)] at 0"),
];

pub fn default_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"))
}

pub fn path_in(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

pub fn load_from(dir: &Path, name: &str) -> Result<Fixture> {
    let path = path_in(dir, name);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let f: Fixture = serde_json::from_str(&text)?;
    if f.version != FIXTURE_VERSION || f.name != name {
        return Err(Error::Format { what: "fixture", detail: format!("{}: version or name mismatch", path.display()) });
    }
    Ok(f)
}

/// Loads a committed fixture.
pub fn load(name: &str) -> Result<Fixture> {
    load_from(&default_dir(), name)
}

pub fn write(dir: &Path, f: &Fixture) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = path_in(dir, &f.name);
    let text = serde_json::to_string_pretty(f)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Numbers equal to a relative `1e-9`, everything else exactly.
pub fn values_match(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            x == y || (x - y).abs() <= 1e-9 * x.abs().max(y.abs())
        }
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(a, b)| values_match(a, b)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| values_match(v, w)))
        }
        _ => a == b,
    }
}

/// Regenerates `names` and reports the ones that differ from `dir`.
pub fn check(dir: &Path, names: &[&str]) -> Result<Vec<String>> {
    let mut stale = Vec::new();
    for &name in names {
        let fresh = generate(name)?;
        match load_from(dir, name) {
            Ok(old)
                if old.method == fresh.method
                    && old.tolerance == fresh.tolerance
                    && old.tolerance_kind == fresh.tolerance_kind
                    && values_match(&old.inputs, &fresh.inputs)
                    && values_match(&old.truth, &fresh.truth) => {}
            _ => stale.push(name.to_string()),
        }
    }
    Ok(stale)
}

pub fn generate_all() -> Result<Vec<Fixture>> {
    REGISTRY.iter().map(|(n, _)| generate(n)).collect()
}

fn fixture(
    name: &str,
    method: Method,
    inputs: Value,
    truth: Value,
    tolerance: f64,
    kind: ToleranceKind,
    note: &str,
) -> Fixture {
    Fixture {
        version: FIXTURE_VERSION,
        name: name.to_string(),
        method,
        inputs,
        truth,
        tolerance,
        tolerance_kind: kind,
        note: note.to_string(),
    }
}

pub fn generate(name: &str) -> Result<Fixture> {
    use Method::*;
    use ToleranceKind::*;
    let f = match name {
        "tape_gradcheck_tanh_net" => {
            let net = TanhNet::random(11);
            let grad = net.fd_gradient(1e-5);
            fixture(
                name,
                FiniteDifference,
                json!({ "widths": TanhNet::WIDTHS, "x": net.x, "params": net.params, "fd_step": 1e-5 }),
                json!({ "grad": grad }),
                1e-4,
                Relative,
                "central differences of a plain-f64 forward pass; weights stored [in, out] row-major per layer",
            )
        }
        "lme_gaussian_64" => {
            let mut rng = SeededRng::new(5, 0);
            let xs: Vec<f64> = (0..64).map(|_| 10.0 * rng.standard_normal()).collect();
            fixture(
                name,
                Exhaustive,
                json!({ "samples": xs }),
                json!({ "value": compensated_log_mean_exp(&xs) }),
                1e-12,
                Absolute,
                "max shift then an error-free TwoSum accumulation of the exponentials",
            )
        }
        "uniform_posterior_mean" => fixture(
            name,
            Analytic,
            json!({ "location": 1.7, "draws": 1_000_000 }),
            json!({ "mean": 1.7, "variance": 1.0 / 12.0 }),
            3.0 * (1.0f64 / 12.0).sqrt() * 1e-3,
            Absolute,
            "a unit-width uniform has variance 1/12",
        ),
        "gaussian_interval_unit" => {
            let r = Rule::on(32, -0.5, 0.5);
            let mass = r.integrate(std_normal_pdf);
            fixture(
                name,
                Quadrature,
                json!({ "sigma": 1.0, "value": 0.0 }),
                json!({ "log_mass": mass.ln(), "mass": mass }),
                1e-12,
                Absolute,
                "32-point Gauss-Legendre of the density over [-1/2, 1/2]",
            )
        }
        "normal_support_09999" => {
            let q = normal_quantile(1.0 - 0.5e-4);
            fixture(
                name,
                Analytic,
                json!({ "sigma": 1.0, "central_mass": 0.9999 }),
                json!({ "upper_quantile": q, "support_bound": 5 }),
                0.0,
                Bound,
                "bisection on the complementary error function",
            )
        }
        "pmf_entropy_sigma2" => {
            let mut h = 0.0;
            for n in -60..=60 {
                let c = n as f64;
                let p = Rule::on(24, c - 0.5, c + 0.5).integrate(|v| std_normal_pdf(v / 2.0) / 2.0);
                if p > 0.0 {
                    h -= p * p.log2();
                }
            }
            fixture(
                name,
                Quadrature,
                json!({ "sigma": 2.0, "support": [-60, 60] }),
                json!({ "entropy_bits": h }),
                1e-3,
                Absolute,
                "per-bin Gauss-Legendre masses",
            )
        }
        "affine_lowpass_smoke" => {
            let (before, after) = affine_smoke()?;
            fixture(
                name,
                Recorded,
                json!({ "channels": 3, "seed": presets::SMOKE_SEED, "steps": presets::SMOKE_STEPS, "lambda": presets::SMOKE_LAMBDA }),
                json!({ "mse_init": before, "mse_trained": after }),
                0.0,
                Bound,
                "reconstruction MSE (0..255 scale) of rounded latents, before and after training",
            )
        }
        "iwae_k4_k16_micro" => {
            let s = presets::micro_spec(false);
            let v = |k| converged(&s, Noise::Uniform, MicroBound::Paired, k).map(|r| r.value);
            fixture(
                name,
                Quadrature,
                micro_inputs(&s, json!({ "k": [4, 16] })),
                json!({ "k4": v(4)?, "k16": v(16)? }),
                3.0,
                StandardErrors,
                "expectation of the log mean of k i.i.d. weights via the Laplace-transform identity",
            )
        }
        "mix_k2_k8_micro" => {
            let s = presets::micro_spec(true);
            let v = |k| converged(&s, Noise::Uniform, MicroBound::SharedZ, k).map(|r| r.value);
            fixture(
                name,
                Quadrature,
                micro_inputs(&s, json!({ "k": [2, 8] })),
                json!({ "k2": v(2)?, "k8": v(8)? }),
                3.0,
                StandardErrors,
                "expectation of the shared-z log mean via the Laplace-transform identity",
            )
        }
        "mix_below_evidence_micro" => {
            let s = presets::micro_spec(true);
            let ks = [1usize, 2, 4, 8, 16];
            let vals = ks
                .iter()
                .map(|&k| converged(&s, Noise::Uniform, MicroBound::SharedZ, k).map(|r| r.value))
                .collect::<Result<Vec<_>>>()?;
            fixture(
                name,
                Quadrature,
                micro_inputs(&s, json!({ "k": ks })),
                json!({ "mix": vals, "log_evidence": evidence(&s)? }),
                3.0,
                StandardErrors,
                "log evidence as ln E_q[w] on the posterior box",
            )
        }
        "dms_above_mix_micro" | "micro_bounds_monotone_k" | "micro_dms_rows_vs_mix" | "cli_bounds_check_micro" => {
            let s = presets::micro_spec(true);
            let ks = [1usize, 4, 16];
            let ls: &[usize] = if name == "cli_bounds_check_micro" { &[1, 4] } else { &[1, 4, 16] };
            let mix = ks
                .iter()
                .map(|&k| converged(&s, Noise::Uniform, MicroBound::SharedZ, k).map(|r| r.value))
                .collect::<Result<Vec<_>>>()?;
            let mut inputs = micro_inputs(&s, json!({ "k": ks, "l": ls, "replicates": 10_000 }));
            if name == "cli_bounds_check_micro" {
                inputs["seed"] = json!(7);
            }
            fixture(
                name,
                Quadrature,
                inputs,
                json!({ "mix": mix, "log_evidence": evidence(&s)? }),
                3.0,
                StandardErrors,
                "MIX expectations bracket the DMS rows from below, the evidence from above",
            )
        }
        "joint_surrogate_identity" => {
            let params = random_micro_params(21);
            fixture(
                name,
                Analytic,
                json!({ "params": params, "x": presets::MICRO_X, "lambda": presets::MICRO_LAMBDA, "k": 8, "seed": 3 }),
                json!({ "max_relative_error": 0.0 }),
                1e-10,
                Absolute,
                "the score of a uniform posterior vanishes, so detaching the weights changes nothing",
            )
        }
        "per_term_vs_joint_k8" => {
            let params = random_micro_params(21);
            let gap = per_term_gap(&params)?;
            fixture(
                name,
                Recorded,
                json!({ "params": params, "x": presets::MICRO_X, "lambda": presets::MICRO_LAMBDA, "k": 8, "seed": 3 }),
                json!({ "max_relative_deviation": gap }),
                1e-3,
                Bound,
                "recorded only; the deviation is expected to exceed the tolerance",
            )
        }
        "elbo_grad_micro" => grad_fixture(name, presets::micro_spec(false), Noise::Uniform, MicroBound::Paired, 1)?,
        "iwae_k8_grad_micro" => grad_fixture(name, presets::micro_spec(false), Noise::Uniform, MicroBound::Paired, 8)?,
        "gaussian_score_zero_mean" => fixture(
            name,
            Analytic,
            json!({ "std": crate::estimators::diagnostic::DEFAULT_STD, "replicates": 100_000 }),
            json!({ "mean": vec![0.0; NPARAM] }),
            3.0,
            StandardErrors,
            "E_q[d ln q] = 0 for any density with fixed support",
        ),
        "demo_square_theta_1p5" | "uniform_moment_square_1p5" => moment_fixture(name, "square", 1.5, 2.0 * 1.5),
        "demo_cube_theta_2" | "cli_demo_cube" => moment_fixture(name, "cube", 2.0, 3.0 * 4.0 + 0.25),
        "uniform_moment_cube_0" => moment_fixture(name, "cube", 0.0, 0.25),
        "uniform_moment_sin_0" => moment_fixture(name, "sin", 0.0, 2.0 * 0.5f64.sin()),
        "dreg_uniform_k8_micro" | "dreg_gaussian_k8_micro" => {
            let noise = if name.contains("gaussian") {
                Noise::Gaussian { std: crate::estimators::diagnostic::DEFAULT_STD }
            } else {
                Noise::Uniform
            };
            let iwae = converged(&presets::micro_spec(false), noise, MicroBound::Paired, 8)?;
            let mix = converged(&presets::micro_spec(true), noise, MicroBound::SharedZ, 8)?;
            let mut inputs = micro_inputs(&presets::micro_spec(false), json!({ "k": 8, "replicates": 10_000 }));
            inputs["noise"] = serde_json::to_value(noise)?;
            fixture(
                name,
                Quadrature,
                inputs,
                json!({ "iwae_grad": iwae.grad, "mix_grad": mix.grad, "iwae_value": iwae.value, "mix_value": mix.value }),
                3.0,
                StandardErrors,
                "gradients by differentiating the Laplace-transform integrand; iwae without direct_y, mix with it",
            )
        }
        "snr_injected_normal" => fixture(
            name,
            Analytic,
            json!({ "mean": 3.0, "std": 1.0, "replicates": 10_000 }),
            json!({ "snr": 3.0 }),
            0.2,
            Absolute,
            "|mean| / std of the injected distribution",
        ),
        "adam_first_step" => {
            let (lr, eps) = (1e-3, 1e-8);
            fixture(
                name,
                Analytic,
                json!({ "lr": lr, "eps": eps, "gradient": 1.0 }),
                json!({ "update": lr / (1.0 + eps) }),
                1e-15,
                Absolute,
                "bias correction makes both moment estimates exact on the first step",
            )
        }
        "smoke_rd_decrease" => {
            let (before, after) = smoke()?.rd;
            fixture(
                name,
                Recorded,
                smoke_inputs(),
                json!({ "rd_cost_init": before, "rd_cost_trained": after }),
                0.0,
                Bound,
                "ELBO cost with fixed noise on the training images, bits per pixel",
            )
        }
        "uq_error_uniform" => fixture(
            name,
            Analytic,
            json!({ "dims": 1_000_000, "input_std": 3.0, "seed": 9 }),
            json!({ "max_ks_distance": 0.01 }),
            0.01,
            Bound,
            "the error of a subtractive dither is exactly U(-1/2, 1/2)",
        ),
        "coder_uniform_256" => fixture(
            name,
            Analytic,
            json!({ "alphabet": 256, "symbols": 4096 }),
            json!({ "bytes": 4096 }),
            16.0,
            Absolute,
            "8 bits per symbol",
        ),
        "coder_overhead_toy" => {
            let slack = smoke()?.coder_slack;
            fixture(
                name,
                Recorded,
                smoke_inputs(),
                json!({ "max_slack_bpp": slack }),
                0.0,
                Bound,
                "max over 20 held-out images of bpp_actual - (1.02 bpp_estimated + 256 / pixels); must be negative",
            )
        }
        "bd_rate_shift_1p10" => fixture(
            name,
            Analytic,
            json!({ "anchor": BD_ANCHOR, "rate_factor": 1.10 }),
            json!({ "bd_br_percent": 10.0 }),
            0.1,
            Absolute,
            "a constant log-rate shift passes unchanged through the fit and integral",
        ),
        "bd_psnr_shift_0p5" => fixture(
            name,
            Analytic,
            json!({ "anchor": BD_ANCHOR, "psnr_offset": 0.5 }),
            json!({ "bd_metric": 0.5 }),
            0.01,
            Absolute,
            "a constant quality offset integrates to itself",
        ),
        "latent_normal_moments" => fixture(
            name,
            Analytic,
            json!({ "mean": 2.0, "std": 3.0, "images": 4000, "dims": 8, "seed": 4 }),
            json!({ "variance": 9.0, "cov": 1.5 }),
            0.3,
            Absolute,
            "Cov tolerance is a sixth of the variance tolerance",
        ),
        "checkerboard_rate_smoke" => {
            let (before, after) = checkerboard_smoke()?;
            fixture(
                name,
                Recorded,
                json!({ "period": 2, "images": 8, "size": 16, "seed": presets::SMOKE_SEED, "steps": presets::SMOKE_STEPS }),
                json!({ "bpp_init": before, "bpp_trained": after }),
                0.0,
                Bound,
                "estimated rate in bits per pixel before and after training",
            )
        }
        "evidence_lambda0_closed_form" => {
            let mut s = presets::micro_spec(true);
            s.lambda = 0.0;
            s.params[4] = 0.0;
            fixture(
                name,
                Analytic,
                micro_inputs(&s, json!({})),
                json!({ "log_evidence": lambda0_box_closed_form(&s) }),
                1e-10,
                Absolute,
                "antiderivatives of the interval probabilities of both priors",
            )
        }
        "evidence_grad_fd" => {
            let s = presets::micro_spec(true);
            let h = 1e-5;
            let grad: Vec<f64> = (0..NPARAM)
                .map(|i| {
                    let (mut a, mut b) = (s.params, s.params);
                    a[i] += h;
                    b[i] -= h;
                    (log_evidence_box(&s.with_params(a), 64).value - log_evidence_box(&s.with_params(b), 64).value)
                        / (2.0 * h)
                })
                .collect();
            fixture(
                name,
                FiniteDifference,
                micro_inputs(&s, json!({ "nodes": 64, "fd_step": h })),
                json!({ "grad": grad }),
                1e-6,
                Absolute,
                "central differences of the box evidence",
            )
        }
        other => return Err(Error::contract(format!("unknown fixture {other:?}"))),
    };
    Ok(f)
}

pub const BD_ANCHOR: [(f64, f64); 5] = [(0.1, 28.0), (0.2, 30.5), (0.4, 33.0), (0.8, 35.2), (1.2, 36.4)];

fn micro_inputs(s: &MicroSpec, extra: Value) -> Value {
    let mut v = json!({
        "params": s.params,
        "param_names": MICRO_PARAM_NAMES,
        "x": s.x,
        "lambda": s.lambda,
        "direct_y": s.direct_y,
    });
    if let (Some(m), Value::Object(e)) = (v.as_object_mut(), extra) {
        m.extend(e);
    }
    v
}

fn moment_fixture(name: &str, f: &str, theta: f64, truth: f64) -> Fixture {
    fixture(
        name,
        Method::Analytic,
        json!({ "f": f, "theta": theta, "n": 100_000, "seed": 1 }),
        json!({ "truth": truth, "score": 0.0 }),
        3.0,
        ToleranceKind::StandardErrors,
        "E[f'(theta + e)] for e ~ U(-1/2, 1/2) in closed form",
    )
}

const QUAD_NODES: usize = 48;
const QUAD_TOL: f64 = 1e-8;

/// Expectation at two node counts; disagreement rejects the fixture.
fn converged(s: &MicroSpec, noise: Noise, bound: MicroBound, k: usize) -> Result<ValueGrad> {
    let n = match noise {
        Noise::Uniform => QUAD_NODES,
        Noise::Gaussian { .. } => QUAD_NODES / 2,
    };
    let coarse = expected_log_mean(s, noise, bound, k, n);
    let fine = expected_log_mean(s, noise, bound, k, 2 * n);
    let gap = (coarse.value - fine.value)
        .abs()
        .max(coarse.grad.iter().zip(&fine.grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    if !(gap < QUAD_TOL) {
        return Err(Error::Quadrature(format!("{bound:?} k={k}: node doubling moved the result by {gap:e}")));
    }
    Ok(fine)
}

fn evidence(s: &MicroSpec) -> Result<f64> {
    let a = log_evidence_box(s, 64).value;
    let b = log_evidence_box(s, 128).value;
    if !((a - b).abs() < QUAD_TOL) {
        return Err(Error::Quadrature(format!("evidence moved by {:e} under node doubling", (a - b).abs())));
    }
    Ok(b)
}

fn grad_fixture(name: &str, s: MicroSpec, noise: Noise, bound: MicroBound, k: usize) -> Result<Fixture> {
    let r = converged(&s, noise, bound, k)?;
    Ok(fixture(
        name,
        Method::Quadrature,
        micro_inputs(&s, json!({ "k": k, "replicates": 10_000 })),
        json!({ "value": r.value, "grad": r.grad }),
        3.0,
        ToleranceKind::StandardErrors,
        "gradient by differentiating the quadrature integrand",
    ))
}

fn random_micro_params(seed: u64) -> [f64; NPARAM] {
    let mut rng = SeededRng::new(seed, 0);
    std::array::from_fn(|_| 0.8 * rng.standard_normal())
}

fn per_term_gap(params: &[f64; NPARAM]) -> Result<f64> {
    use crate::estimators::surrogate_grad;
    use crate::objectives::SurrogateStyle;
    let m = HierModel::micro(params, false);
    let x = crate::tensor::Tensor::full(&[1, 1, 1, 1], presets::MICRO_X);
    let g = |style| surrogate_grad(&m, &x, GridMode::Iwae, 8, 8, presets::MICRO_LAMBDA, 3, style).map(|e| e.flat());
    let (a, b) = (g(SurrogateStyle::Joint)?, g(SurrogateStyle::PerTerm)?);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper-tail inverse by bisection on `erfc`.
fn normal_quantile(p: f64) -> f64 {
    let cdf = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn compensated_log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut hi, mut lo) = (0.0, 0.0);
    for &x in xs {
        let (s, e) = two_sum(hi, (x - m).exp());
        hi = s;
        lo += e;
    }
    m + ((hi + lo) / xs.len() as f64).ln()
}

/// Three affine layers with tanh between, evaluated in plain `f64`.
struct TanhNet {
    x: Vec<f64>,
    params: Vec<f64>,
}

impl TanhNet {
    const WIDTHS: [usize; 4] = [4, 6, 5, 1];

    fn random(seed: u64) -> Self {
        let mut rng = SeededRng::new(seed, 0);
        let n: usize = Self::WIDTHS.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            x: (0..Self::WIDTHS[0]).map(|_| rng.standard_normal()).collect(),
            params: (0..n).map(|_| 0.7 * rng.standard_normal()).collect(),
        }
    }

    fn forward(&self, params: &[f64]) -> f64 {
        let mut h = self.x.clone();
        let mut off = 0;
        for (li, w) in Self::WIDTHS.windows(2).enumerate() {
            let (din, dout) = (w[0], w[1]);
            let mut next = vec![0.0; dout];
            for (o, n) in next.iter_mut().enumerate() {
                *n = params[off + din * dout + o];
                for (i, hv) in h.iter().enumerate() {
                    *n += hv * params[off + i * dout + o];
                }
            }
            off += din * dout + dout;
            if li < 2 {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = next;
        }
        h[0]
    }

    fn fd_gradient(&self, h: f64) -> Vec<f64> {
        (0..self.params.len())
            .map(|i| {
                let (mut a, mut b) = (self.params.clone(), self.params.clone());
                a[i] += h;
                b[i] -= h;
                (self.forward(&a) - self.forward(&b)) / (2.0 * h)
            })
            .collect()
    }
}

fn smoke_inputs() -> Value {
    json!({
        "data": "mixed, 16 images of 16x16, seed 1",
        "held_out": "mixed, 20 images of 16x16, seed 2",
        "seed": presets::SMOKE_SEED,
        "steps": presets::SMOKE_STEPS,
        "lambda": presets::SMOKE_LAMBDA,
        "lr": presets::SMOKE_LR,
    })
}

struct SmokeRecord {
    rd: (f64, f64),
    coder_slack: f64,
}

fn smoke() -> Result<&'static SmokeRecord> {
    static CELL: OnceLock<std::result::Result<SmokeRecord, String>> = OnceLock::new();
    CELL.get_or_init(|| run_smoke().map_err(|e| e.to_string()))
        .as_ref()
        .map_err(|e| Error::contract(format!("smoke run failed: {e}")))
}

fn run_smoke() -> Result<SmokeRecord> {
    use crate::codec::{evaluate_rd, QuantMode};
    use crate::trainer::{rd_cost_on, train, RunSink};
    let data = presets::smoke_data();
    let model = presets::smoke_model(true);
    let before = rd_cost_on(&model, &data.images, presets::SMOKE_LAMBDA, 8, 99)?;
    let out = train(&presets::smoke_config(GridMode::Elbo, 1), model, &data.images, &RunSink::default())?;
    let trained = out.state.model;
    let after = rd_cost_on(&trained, &data.images, presets::SMOKE_LAMBDA, 8, 99)?;
    let mut slack = f64::NEG_INFINITY;
    for (i, img) in presets::eval_data().images.iter().enumerate() {
        let p = evaluate_rd(&trained, img, presets::SMOKE_LAMBDA, QuantMode::Round, i as u64)?;
        let pixels = (img.shape()[1] * img.shape()[2]) as f64;
        slack = slack.max(p.bpp_actual - (1.02 * p.bpp_estimated + 256.0 / pixels));
    }
    Ok(SmokeRecord { rd: (before, after), coder_slack: slack })
}

fn affine_smoke() -> Result<(f64, f64)> {
    use crate::codec::{evaluate_rd_set, QuantMode};
    use crate::trainer::{train, RunSink};
    let data = presets::smoke_data();
    let model = HierModel::identity_like(3, true, presets::SMOKE_SEED)?;
    let mse = |m: &HierModel| {
        evaluate_rd_set(m, &data.images, presets::SMOKE_LAMBDA, QuantMode::Round, 0).map(|s| s.mean.mse_255)
    };
    let before = mse(&model)?;
    let out = train(&presets::smoke_config(GridMode::Elbo, 1), model, &data.images, &RunSink::default())?;
    Ok((before, mse(&out.state.model)?))
}

fn checkerboard_smoke() -> Result<(f64, f64)> {
    use crate::codec::{evaluate_rd_set, QuantMode};
    use crate::harness::data::{synthesize, SyntheticKind};
    use crate::trainer::{train, RunSink};
    let data = synthesize(SyntheticKind::Checkerboard, 8, 16, 3, 3, 2.0, 2)?;
    let model = presets::smoke_model(true);
    let bpp = |m: &HierModel| {
        evaluate_rd_set(m, &data.images, presets::SMOKE_LAMBDA, QuantMode::Round, 0).map(|s| s.mean.bpp_estimated)
    };
    let before = bpp(&model)?;
    let out = train(&presets::smoke_config(GridMode::Elbo, 1), model, &data.images, &RunSink::default())?;
    Ok((before, bpp(&out.state.model)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique() {
        let mut names: Vec<&str> = REGISTRY.iter().map(|(n, _)| *n).collect();
        names.sort_unstable();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());
    }

    #[test]
    fn compensated_sum_is_shift_invariant() {
        let xs = [1.0, 2.0, 3.0];
        let shifted: Vec<f64> = xs.iter().map(|v| v + 1000.0).collect();
        assert!((compensated_log_mean_exp(&shifted) - compensated_log_mean_exp(&xs) - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_the_tail() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-10);
    }

    #[test]
    fn tanh_net_gradient_is_smooth() {
        let net = TanhNet::random(11);
        let a = net.fd_gradient(1e-5);
        let b = net.fd_gradient(2e-5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
    }
}
