//! Cross-run analytics: Bjontegaard deltas between R-D curves, latent
//! spread statistics and replicate checks of the bound ordering.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::RDPoint;
use crate::error::{Error, Result};
use crate::estimators::replicate_seed;
use crate::model::{GridMode, HierModel, ZSource, MICRO_PARAM_NAMES};
use crate::objectives::evaluate;
use crate::oracles::micro::{log_evidence_box, MicroSpec};
use crate::tensor::{SeededRng, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RDCurve {
    pub label: String,
    /// Sorted by strictly increasing `bpp_actual`.
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    /// Sorts `points` by rate and rejects repeated rates.
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp_actual.total_cmp(&b.bpp_actual));
        if points.windows(2).any(|w| w[1].bpp_actual <= w[0].bpp_actual) {
            return Err(Error::contract("R-D curve rates must be distinct"));
        }
        Ok(Self { label: label.into(), points })
    }

    /// Convenience constructor from `(bpp, psnr)` pairs.
    pub fn from_pairs(label: impl Into<String>, pairs: &[(f64, f64)]) -> Result<Self> {
        let points = pairs
            .iter()
            .map(|&(bpp, psnr)| {
                let mse = 65025.0 / 10f64.powf(psnr / 10.0);
                RDPoint {
                    bpp_estimated: bpp,
                    bpp_actual: bpp,
                    bpp_continuous: bpp,
                    mse_255: mse,
                    psnr_db: psnr,
                    rd_cost: f64::NAN,
                    lambda: f64::NAN,
                }
            })
            .collect();
        Self::new(label, points)
    }

    /// Whether quality strictly increases with rate.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].psnr_db > w[0].psnr_db)
    }

    fn log_rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bpp_actual.log10()).collect()
    }

    fn psnrs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.psnr_db).collect()
    }
}

/// A least-squares cubic in a centered variable.
struct Cubic {
    center: f64,
    coef: [f64; 4],
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        let center = x.iter().sum::<f64>() / x.len() as f64;
        let a = DMatrix::from_fn(x.len(), 4, |i, j| (x[i] - center).powi(j as i32));
        let b = DVector::from_column_slice(y);
        let sol = a.svd(true, true).solve(&b, 1e-14).map_err(|e| Error::BdUndefined(e.to_string()))?;
        Ok(Self { center, coef: [sol[0], sol[1], sol[2], sol[3]] })
    }

    fn antiderivative(&self, x: f64) -> f64 {
        let t = x - self.center;
        self.coef.iter().enumerate().map(|(j, c)| c * t.powi(j as i32 + 1) / (j as f64 + 1.0)).sum()
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdResult {
    /// Average rate difference in percent at equal quality; negative
    /// means the test curve saves bits.
    pub bd_br_percent: f64,
    /// Average PSNR difference in dB at equal rate.
    pub bd_metric: f64,
}

/// Bjontegaard deltas of `test` against `anchor` on PSNR, from cubic fits
/// in log10 rate integrated over the overlapping interval.
pub fn bd_metrics(anchor: &RDCurve, test: &RDCurve) -> Result<BdResult> {
    for c in [anchor, test] {
        if c.points.len() < 4 {
            return Err(Error::BdUndefined(format!("curve {:?} has {} points, need 4", c.label, c.points.len())));
        }
        if !c.is_monotone() {
            return Err(Error::BdUndefined(format!("quality of curve {:?} is not increasing in rate", c.label)));
        }
    }
    let (ra, qa) = (anchor.log_rates(), anchor.psnrs());
    let (rt, qt) = (test.log_rates(), test.psnrs());
    let overlap = |a: &[f64], b: &[f64]| {
        let lo = a[0].max(b[0]);
        let hi = a[a.len() - 1].min(b[b.len() - 1]);
        (hi > lo).then_some((lo, hi))
    };

    let (lo, hi) = overlap(&ra, &rt).ok_or_else(|| Error::BdUndefined("rate ranges do not overlap".into()))?;
    let pa = Cubic::fit(&ra, &qa)?;
    let pt = Cubic::fit(&rt, &qt)?;
    let bd_metric = (pt.integral(lo, hi) - pa.integral(lo, hi)) / (hi - lo);

    let (lo, hi) = overlap(&qa, &qt).ok_or_else(|| Error::BdUndefined("quality ranges do not overlap".into()))?;
    let ia = Cubic::fit(&qa, &ra)?;
    let it = Cubic::fit(&qt, &rt)?;
    let avg = (it.integral(lo, hi) - ia.integral(lo, hi)) / (hi - lo);
    let bd_br_percent = (10f64.powf(avg) - 1.0) * 100.0;
    Ok(BdResult { bd_br_percent, bd_metric })
}

pub const HIST_BINS: usize = 64;
pub const HIST_FLOOR: f64 = 1e-12;
pub const COV_MEAN_FLOOR: f64 = 1e-6;

/// Counts of per-dimension variances on log-spaced bins over
/// `[HIST_FLOOR, max]`; smaller values land in the first bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `HIST_BINS + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn log_spaced(values: &[f64]) -> Self {
        let max = values.iter().copied().fold(0.0, f64::max).max(HIST_FLOOR * 10.0);
        let (a, b) = (HIST_FLOOR.log10(), max.log10());
        let edges: Vec<f64> = (0..=HIST_BINS).map(|i| 10f64.powf(a + (b - a) * i as f64 / HIST_BINS as f64)).collect();
        let mut counts = vec![0; HIST_BINS];
        for &v in values {
            let bin = if v <= HIST_FLOOR {
                0
            } else {
                (((v.log10() - a) / (b - a) * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
            };
            counts[bin] += 1;
        }
        Self { edges, counts }
    }

    /// `bins` equal bins over `[lo, hi]`; values outside are clamped into
    /// the end bins.
    pub fn linear(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let t = ((v - lo) / (hi - lo) * bins as f64).floor();
            counts[(t.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }

    pub const CSV_HEADER: &'static str = "bin_lo,bin_hi,count";

    pub fn csv_rows(&self) -> Vec<String> {
        self.counts.iter().enumerate().map(|(i, c)| format!("{},{},{}", self.edges[i], self.edges[i + 1], c)).collect()
    }
}

/// Spread of one latent tensor across a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub mean: Vec<f64>,
    /// Unbiased variance per dimension.
    pub variance: Vec<f64>,
    /// `std / max(|mean|, COV_MEAN_FLOOR)` per dimension.
    pub cov: Vec<f64>,
    pub mean_variance: f64,
    pub mean_cov: f64,
    pub histogram: Histogram,
}

/// Statistics over `samples[i][d]`, image `i`, dimension `d`.
pub fn level_stats(samples: &[Vec<f64>]) -> Result<LevelStats> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::contract("latent statistics need at least 2 images"));
    }
    let dims = samples[0].len();
    if samples.iter().any(|s| s.len() != dims) {
        return Err(Error::Shape("latent sizes differ across images".into()));
    }
    let mut mean = vec![0.0; dims];
    let mut variance = vec![0.0; dims];
    for d in 0..dims {
        let m = samples.iter().map(|s| s[d]).sum::<f64>() / n as f64;
        mean[d] = m;
        variance[d] = samples.iter().map(|s| (s[d] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    let cov: Vec<f64> = mean.iter().zip(&variance).map(|(m, v)| v.sqrt() / m.abs().max(COV_MEAN_FLOOR)).collect();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(LevelStats {
        mean_variance: avg(&variance),
        mean_cov: avg(&cov),
        histogram: Histogram::log_spaced(&variance),
        mean,
        variance,
        cov,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentStats {
    pub n_images: usize,
    pub y: LevelStats,
    pub z: LevelStats,
    pub y_rounded: LevelStats,
    pub z_rounded: LevelStats,
    /// The rounded statistics reuse the continuous analysis outputs and
    /// differ from them only by the rounding stage.
    pub rounded_from_shared_pipeline: bool,
}

/// Per-dimension statistics of the posterior means and their roundings
/// over `images: [C, H, W]`.
pub fn latent_stats(model: &HierModel, images: &[Tensor]) -> Result<LatentStats> {
    if images.len() < 2 {
        return Err(Error::contract("latent statistics need at least 2 images"));
    }
    let per_image = images
        .par_iter()
        .map(|img| {
            let s = img.shape();
            let tape = Tape::no_grad();
            let b = model.bind(&tape);
            let x = tape.constant(img.reshape(&[1, s[0], s[1], s[2]])?);
            let y = b.infer_y(&x)?.mean().clone();
            let src = if model.direct_y() { ZSource::Mean(&y) } else { ZSource::Samples(&y) };
            let z = b.infer_z(src)?.mean().value().data().to_vec();
            Ok((y.value().data().to_vec(), z))
        })
        .collect::<Result<Vec<_>>>()?;
    let round = |v: &Vec<f64>| v.iter().map(|x| x.round_ties_even()).collect::<Vec<_>>();
    let ys: Vec<Vec<f64>> = per_image.iter().map(|p| p.0.clone()).collect();
    let zs: Vec<Vec<f64>> = per_image.iter().map(|p| p.1.clone()).collect();
    Ok(LatentStats {
        n_images: images.len(),
        y_rounded: level_stats(&ys.iter().map(round).collect::<Vec<_>>())?,
        z_rounded: level_stats(&zs.iter().map(round).collect::<Vec<_>>())?,
        y: level_stats(&ys)?,
        z: level_stats(&zs)?,
        rounded_from_shared_pipeline: true,
    })
}

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `samples` and `U(-1/2, 1/2)`.
pub fn ks_uniform_distance(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x + 0.5).clamp(0.0, 1.0);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Reads the micro-model parameters out of `model`.
pub fn micro_spec(model: &HierModel, x: f64, lambda: f64) -> Result<MicroSpec> {
    let mut params = [0.0; MICRO_PARAM_NAMES.len()];
    for (p, name) in params.iter_mut().zip(MICRO_PARAM_NAMES) {
        let t = model.param(name).ok_or_else(|| Error::contract("not a micro model"))?;
        if t.len() != 1 {
            return Err(Error::contract("not a micro model"));
        }
        *p = t.item();
    }
    Ok(MicroSpec { params, x, lambda, direct_y: model.direct_y() })
}

pub const MIN_ORDERING_REPLICATES: usize = 1000;
/// Quadrature nodes per axis for the evidence of the micro model.
const EVIDENCE_NODES: usize = 96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub mode: GridMode,
    pub k: usize,
    pub l: usize,
    pub mean: f64,
    pub se: f64,
    pub ci95: (f64, f64),
}

impl BoundRow {
    pub fn label(&self) -> String {
        match self.mode {
            GridMode::Elbo => "elbo".into(),
            GridMode::Dms => format!("dms_k{}_l{}", self.k, self.l),
            m => format!("{}_k{}", m.name(), self.k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingViolation {
    pub lower: String,
    pub upper: String,
    /// Mean of `lower - upper` over paired replicates; positive.
    pub mean_gap: f64,
    pub se: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundOrderingReport {
    pub rows: Vec<BoundRow>,
    /// Quadrature log evidence on the micro model.
    pub log_evidence: Option<f64>,
    pub violations: Vec<OrderingViolation>,
    /// Every checked pair, violated or not, as `(lower, upper, z)` where
    /// `z` is the paired gap in standard errors.
    pub checks: Vec<(String, String, f64)>,
    pub n_replicates: usize,
    pub seed: u64,
}

impl BoundOrderingReport {
    pub const CSV_HEADER: &'static str = "bound,mode,k,l,mean,se,ci_lo,ci_hi";

    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .rows
            .iter()
            .map(|r| {
                format!("{},{},{},{},{},{},{},{}", r.label(), r.mode.name(), r.k, r.l, r.mean, r.se, r.ci95.0, r.ci95.1)
            })
            .collect();
        if let Some(e) = self.log_evidence {
            rows.push(format!("log_evidence,quadrature,,,{e},0,{e},{e}"));
        }
        rows
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Replicate means of every valid bound for `x: [1, C, H, W]` under
/// paired seeds, with the expected ordering checked at 3 standard errors
/// of the paired differences. `micro` adds the quadrature evidence as
/// the top of the chain.
#[allow(clippy::too_many_arguments)]
pub fn bound_ordering_report(
    model: &HierModel,
    x: &Tensor,
    lambda: f64,
    micro: bool,
    k_list: &[usize],
    l_list: &[usize],
    n_replicates: usize,
    seed: u64,
) -> Result<BoundOrderingReport> {
    if n_replicates < MIN_ORDERING_REPLICATES {
        return Err(Error::contract(format!("bound ordering needs at least {MIN_ORDERING_REPLICATES} replicates")));
    }
    let mut specs: Vec<(GridMode, usize, usize)> = vec![(GridMode::Elbo, 1, 1)];
    for &k in k_list {
        if model.direct_y() {
            specs.push((GridMode::Mix, k, 1));
            for &l in l_list {
                specs.push((GridMode::Dms, k, l));
            }
        } else {
            specs.push((GridMode::Iwae, k, k));
        }
    }
    let log_evidence = if micro {
        let px = x.data();
        if px.len() != 1 {
            return Err(Error::Shape("micro model takes a single pixel".into()));
        }
        Some(log_evidence_box(&micro_spec(model, px[0], lambda)?, EVIDENCE_NODES).value)
    } else {
        None
    };

    let samples: Vec<Vec<f64>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            let tape = Tape::no_grad();
            let b = model.bind(&tape);
            let xv = tape.constant(x.clone());
            let rs = replicate_seed(seed, r);
            specs
                .iter()
                .map(|&(mode, k, l)| {
                    let mut rng = SeededRng::new(rs, 0);
                    Ok(evaluate(&b, &xv, mode, k, l, lambda, &mut rng)?.report.total)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let column = |j: usize| samples.iter().map(|s| s[j]).collect::<Vec<_>>();
    let rows: Vec<BoundRow> = specs
        .iter()
        .enumerate()
        .map(|(j, &(mode, k, l))| {
            let (mean, se) = mean_se(&column(j));
            BoundRow { mode, k, l, mean, se, ci95: (mean - 1.96 * se, mean + 1.96 * se) }
        })
        .collect();

    let idx = |mode: GridMode, k: usize, l: usize| specs.iter().position(|s| *s == (mode, k, l));
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut ks = k_list.to_vec();
    ks.sort_unstable();
    let mut ls = l_list.to_vec();
    ls.sort_unstable();
    for (i, &k) in ks.iter().enumerate() {
        let top = if model.direct_y() { GridMode::Mix } else { GridMode::Iwae };
        let kl = if model.direct_y() { 1 } else { k };
        let row = idx(top, k, kl).expect("row exists");
        pairs.push((0, row));
        if let Some(&k2) = ks.get(i + 1) {
            pairs.push((row, idx(top, k2, if model.direct_y() { 1 } else { k2 }).expect("row exists")));
        }
        if model.direct_y() {
            for (j, &l) in ls.iter().enumerate() {
                let d = idx(GridMode::Dms, k, l).expect("row exists");
                pairs.push((row, d));
                if let Some(&l2) = ls.get(j + 1) {
                    pairs.push((d, idx(GridMode::Dms, k, l2).expect("row exists")));
                }
                if let Some(&k2) = ks.get(i + 1) {
                    pairs.push((d, idx(GridMode::Dms, k2, l).expect("row exists")));
                }
            }
        }
    }
    pairs.dedup();

    let mut violations = Vec::new();
    let mut checks = Vec::new();
    for (a, b) in pairs {
        if a == b {
            continue;
        }
        let diff: Vec<f64> = samples.iter().map(|s| s[a] - s[b]).collect();
        let (m, se) = mean_se(&diff);
        let z = if se > 0.0 {
            m / se
        } else if m > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        checks.push((rows[a].label(), rows[b].label(), z));
        if m > 3.0 * se {
            violations.push(OrderingViolation { lower: rows[a].label(), upper: rows[b].label(), mean_gap: m, se });
        }
    }
    if let Some(e) = log_evidence {
        for r in &rows {
            let z = if r.se > 0.0 { (r.mean - e) / r.se } else { 0.0 };
            checks.push((r.label(), "log_evidence".into(), z));
            if r.mean - e > 3.0 * r.se {
                violations.push(OrderingViolation {
                    lower: r.label(),
                    upper: "log_evidence".into(),
                    mean_gap: r.mean - e,
                    se: r.se,
                });
            }
        }
    }
    Ok(BoundOrderingReport { rows, log_evidence, violations, checks, n_replicates, seed })
}
