//! Plain-arithmetic micro model and quadrature expectations over its
//! posterior noise.
//!
//! The micro model has one pixel, one `y` and one `z` dimension, so every
//! log-weight is a function of two noise scalars. Expectations of
//! `ln mean_k w` use
//!
//! ```text
//! E ln S = integral_0^inf (e^-t - E e^(-t S)) / t dt
//! ```
//!
//! with `E e^(-t S) = phi(t / k)^k` whenever the `k` terms of `S` are
//! i.i.d. (conditionally on a shared `z` for the mixture bound), and `phi`
//! a two-dimensional Gauss-Legendre sum. Differentiating under the
//! integral gives the gradient without the `1/t` factor.
#![allow(clippy::needless_range_loop)]

use std::f64::consts::{LN_2, PI, SQRT_2};
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::quadrature::Rule;

pub const NPARAM: usize = 10;

/// Numbers the micro model can be evaluated on.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn softplus(self) -> Self;
    /// `ln(Phi(b) - Phi(a))`.
    fn ln_phi_interval(a: Self, b: Self) -> Self;
    /// `ln(sigmoid(b) - sigmoid(a))`.
    fn ln_sig_interval(a: Self, b: Self) -> Self;
}

fn phi_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn ln_phi_interval_f64(a: f64, b: f64) -> f64 {
    // work in the tail where the smaller CDF is accurate
    if a > 0.0 {
        (0.5 * libm::erfc(a / SQRT_2) - 0.5 * libm::erfc(b / SQRT_2)).ln()
    } else if b < 0.0 {
        (phi_cdf(b) - phi_cdf(a)).ln()
    } else {
        (1.0 - phi_cdf(a) - 0.5 * libm::erfc(b / SQRT_2)).ln()
    }
}

fn sig(x: f64) -> f64 {
    0.5 * (1.0 + (0.5 * x).tanh())
}

fn ln_sig_interval_f64(a: f64, b: f64) -> f64 {
    (0.5 * ((0.5 * b).tanh() - (0.5 * a).tanh())).ln()
}

fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    fn ln_phi_interval(a: Self, b: Self) -> Self {
        ln_phi_interval_f64(a, b)
    }
    fn ln_sig_interval(a: Self, b: Self) -> Self {
        ln_sig_interval_f64(a, b)
    }
}

/// Forward-mode number carrying derivatives in all micro parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; NPARAM],
}

impl Dual {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; NPARAM];
        d[i] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self { v, d: self.d.map(|x| x * dv) }
    }

    fn chain2(a: Self, b: Self, v: f64, da: f64, db: f64) -> Self {
        let mut d = [0.0; NPARAM];
        for i in 0..NPARAM {
            d[i] = a.d[i] * da + b.d[i] * db;
        }
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::chain2(self, o, self.v + o.v, 1.0, 1.0)
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::chain2(self, o, self.v - o.v, 1.0, -1.0)
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::chain2(self, o, self.v * o.v, o.v, self.v)
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Self::chain2(self, o, self.v / o.v, 1.0 / o.v, -self.v / (o.v * o.v))
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; NPARAM] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn softplus(self) -> Self {
        self.chain(softplus_f64(self.v), sig(self.v))
    }
    fn ln_phi_interval(a: Self, b: Self) -> Self {
        let lp = ln_phi_interval_f64(a.v, b.v);
        let p = lp.exp();
        Self::chain2(a, b, lp, -phi_pdf(a.v) / p, phi_pdf(b.v) / p)
    }
    fn ln_sig_interval(a: Self, b: Self) -> Self {
        let lp = ln_sig_interval_f64(a.v, b.v);
        let p = lp.exp();
        let ds = |x: f64| sig(x) * sig(-x);
        Self::chain2(a, b, lp, -ds(a.v) / p, ds(b.v) / p)
    }
}

/// Posterior noise of the micro model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum Noise {
    Uniform,
    Gaussian { std: f64 },
}

/// A micro model instance: parameters in
/// [`crate::model::MICRO_PARAM_NAMES`] order, a one-pixel input and the
/// trade-off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroSpec {
    pub params: [f64; NPARAM],
    pub x: f64,
    pub lambda: f64,
    pub direct_y: bool,
}

/// Log-weight terms at one noise draw.
pub struct Terms<R> {
    pub log_px: R,
    pub log_pyz: R,
    pub log_pz: R,
    /// Posterior log-density; zero for the uniform posterior.
    pub log_q: R,
}

impl<R: Real> Terms<R> {
    pub fn log_w(&self) -> R {
        self.log_px + self.log_pyz + self.log_pz - self.log_q
    }
}

/// Evaluates the micro model at noise `(ey, ez)`.
pub fn terms<R: Real>(
    p: &[R; NPARAM],
    x: f64,
    lambda: f64,
    direct_y: bool,
    noise: Noise,
    ey: f64,
    ez: f64,
) -> Terms<R> {
    let c = R::cst;
    let y = p[0] * c(x) + p[1];
    let yt = y + c(ey);
    let zin = if direct_y { y } else { yt };
    let zt = p[2] * zin + p[3] + c(ez);
    let s = (p[4] * zt + p[5]).softplus() + c(crate::densities::SCALE_FLOOR);
    let log_pyz = R::ln_phi_interval((yt - c(0.5)) / s, (yt + c(0.5)) / s);
    let err = p[6] * yt + p[7] - c(x);
    let log_px = -(c(LN_2 * lambda * 65025.0) * err * err);
    let a = p[8].softplus();
    let log_pz = R::ln_sig_interval(a * (zt - c(0.5)) + p[9], a * (zt + c(0.5)) + p[9]);
    let log_q = match noise {
        Noise::Uniform => c(0.0),
        Noise::Gaussian { std } => {
            let ln_n = |e: f64| -0.5 * (e / std).powi(2) - std.ln() - 0.5 * (2.0 * PI).ln();
            c(ln_n(ey) + ln_n(ez))
        }
    };
    Terms { log_px, log_pyz, log_pz, log_q }
}

fn duals(p: &[f64; NPARAM]) -> [Dual; NPARAM] {
    std::array::from_fn(|i| Dual::var(p[i], i))
}

impl MicroSpec {
    pub fn log_w(&self, noise: Noise, ey: f64, ez: f64) -> f64 {
        terms(&self.params, self.x, self.lambda, self.direct_y, noise, ey, ez).log_w()
    }

    pub fn log_w_dual(&self, noise: Noise, ey: f64, ez: f64) -> Dual {
        terms(&duals(&self.params), self.x, self.lambda, self.direct_y, noise, ey, ez).log_w()
    }

    pub fn with_params(&self, params: [f64; NPARAM]) -> Self {
        Self { params, ..*self }
    }
}

/// Nodes and probability weights of the noise along one axis.
pub fn noise_rule(noise: Noise, n: usize) -> Rule {
    match noise {
        Noise::Uniform => Rule::on(n, -0.5, 0.5),
        Noise::Gaussian { std } => {
            let mut r = Rule::composite(n, -10.0 * std, 10.0 * std, 4);
            for (w, &x) in r.weights.iter_mut().zip(&r.nodes) {
                *w *= (-0.5 * (x / std).powi(2)).exp() / (std * (2.0 * PI).sqrt());
            }
            r
        }
    }
}

/// Which `k`-sample bound an expectation is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicroBound {
    /// `k` i.i.d. `(y, z)` pairs; with `k = 1` this is the ELBO.
    Paired,
    /// `k` values of `y` sharing one `z`.
    SharedZ,
}

/// Value and gradient of an expected log-weight quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueGrad {
    pub value: f64,
    pub grad: [f64; NPARAM],
}

struct Point {
    p: f64,
    lw: f64,
    g: [f64; NPARAM],
}

/// Groups of noise nodes; within a group the `k` terms are i.i.d.
fn groups(spec: &MicroSpec, noise: Noise, bound: MicroBound, n: usize) -> Vec<(f64, Vec<Point>)> {
    let r = noise_rule(noise, n);
    let point = |ey: f64, ez: f64, p: f64| {
        let d = spec.log_w_dual(noise, ey, ez);
        Point { p, lw: d.v, g: d.d }
    };
    match bound {
        MicroBound::Paired => {
            let mut pts = Vec::with_capacity(r.nodes.len().pow(2));
            for (&ey, &wy) in r.nodes.iter().zip(&r.weights) {
                for (&ez, &wz) in r.nodes.iter().zip(&r.weights) {
                    pts.push(point(ey, ez, wy * wz));
                }
            }
            vec![(1.0, pts)]
        }
        MicroBound::SharedZ => r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(&ez, &wz)| {
                let pts = r.nodes.iter().zip(&r.weights).map(|(&ey, &wy)| point(ey, ez, wy)).collect();
                (wz, pts)
            })
            .collect(),
    }
}

/// `E[ln (1/k) sum_i w_i]` and its gradient.
pub fn expected_log_mean(spec: &MicroSpec, noise: Noise, bound: MicroBound, k: usize, n: usize) -> ValueGrad {
    assert!(k >= 1, "k must be positive");
    let gs = groups(spec, noise, bound, n);
    if k == 1 {
        let (mut value, mut grad) = (0.0, [0.0; NPARAM]);
        for (pg, pts) in &gs {
            for q in pts {
                value += pg * q.p * q.lw;
                for i in 0..NPARAM {
                    grad[i] += pg * q.p * q.g[i];
                }
            }
        }
        return ValueGrad { value, grad };
    }
    let c = gs.iter().flat_map(|(_, p)| p.iter().map(|q| q.lw)).fold(f64::NEG_INFINITY, f64::max);
    let lo = gs.iter().flat_map(|(_, p)| p.iter().map(|q| q.lw)).fold(f64::INFINITY, f64::min);
    let span = c - lo;
    let kf = k as f64;
    // u = ln s; the integrands die off well inside this window
    let u_rule = Rule::composite(8, -45.0, span + kf.ln() + 45.0, ((span + 90.0) / 0.25).ceil() as usize);

    let (mut value, mut grad) = (c, [0.0; NPARAM]);
    for (pg, pts) in &gs {
        let wp: Vec<f64> = pts.iter().map(|q| (q.lw - c).exp()).collect();
        let phi = |s: f64| pts.iter().zip(&wp).map(|(q, w)| q.p * (-s * w).exp()).sum::<f64>();
        let mut acc_v = 0.0;
        let mut acc_g = [0.0; NPARAM];
        for (&u, &wu) in u_rule.nodes.iter().zip(&u_rule.weights) {
            let t = u.exp();
            // value: (e^-t - phi(t/k)^k) dt/t with dt/t = du
            acc_v += wu * ((-t).exp() - phi(t / kf).powi(k as i32));
            // gradient: k phi(s)^(k-1) E[w e^(-s w) g] ds with ds = s du
            let s = t;
            let ph = phi(s).powi(k as i32 - 1);
            if ph == 0.0 {
                continue;
            }
            let mut inner = [0.0; NPARAM];
            for (q, w) in pts.iter().zip(&wp) {
                let f = q.p * w * (-s * w).exp();
                if f != 0.0 {
                    for i in 0..NPARAM {
                        inner[i] += f * q.g[i];
                    }
                }
            }
            let scale = wu * kf * ph * s;
            for i in 0..NPARAM {
                acc_g[i] += scale * inner[i];
            }
        }
        value += pg * acc_v;
        for i in 0..NPARAM {
            grad[i] += pg * acc_g[i];
        }
    }
    ValueGrad { value, grad }
}

/// Brute-force `E[ln mean_k w]` for paired samples by nested quadrature
/// over all `2k` noise scalars. Only feasible for tiny `k` and `n`.
pub fn nested_paired_log_mean(spec: &MicroSpec, noise: Noise, k: usize, n: usize) -> f64 {
    let r = noise_rule(noise, n);
    let pts: Vec<(f64, f64)> = r
        .nodes
        .iter()
        .zip(&r.weights)
        .flat_map(|(&ey, &wy)| r.nodes.iter().zip(&r.weights).map(move |(&ez, &wz)| (ey, ez, wy * wz)))
        .map(|(ey, ez, p)| (p, spec.log_w(noise, ey, ez)))
        .collect();
    let m = pts.len();
    let mut idx = vec![0usize; k];
    let mut total = 0.0;
    loop {
        let p: f64 = idx.iter().map(|&i| pts[i].0).product();
        let mx = idx.iter().map(|&i| pts[i].1).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = idx.iter().map(|&i| (pts[i].1 - mx).exp()).sum();
        total += p * (mx + (s / k as f64).ln());
        let mut d = 0;
        loop {
            idx[d] += 1;
            if idx[d] < m {
                break;
            }
            idx[d] = 0;
            d += 1;
            if d == k {
                return total;
            }
        }
    }
}

/// Log evidence restricted to the posterior support: `ln E_q[w]`, the
/// limit of every bound as the sample counts grow.
pub fn log_evidence_box(spec: &MicroSpec, n: usize) -> ValueGrad {
    let r = noise_rule(Noise::Uniform, n);
    let mut pts = Vec::with_capacity(n * n);
    for (&ey, &wy) in r.nodes.iter().zip(&r.weights) {
        for (&ez, &wz) in r.nodes.iter().zip(&r.weights) {
            let d = spec.log_w_dual(Noise::Uniform, ey, ez);
            pts.push((wy * wz, d));
        }
    }
    let c = pts.iter().map(|(_, d)| d.v).fold(f64::NEG_INFINITY, f64::max);
    let (mut s, mut g) = (0.0, [0.0; NPARAM]);
    for (p, d) in &pts {
        let w = p * (d.v - c).exp();
        s += w;
        for i in 0..NPARAM {
            g[i] += w * d.d[i];
        }
    }
    ValueGrad { value: c + s.ln(), grad: g.map(|v| v / s) }
}

/// `ln integral p(x, y~, z~) dy~ dz~` over the whole plane, truncated to
/// `half_width` around the posterior means.
pub fn log_evidence_full(spec: &MicroSpec, half_width: f64, panels: usize) -> f64 {
    let r = Rule::composite(16, -half_width, half_width, panels);
    let mut vals = Vec::with_capacity(r.nodes.len().pow(2));
    let p = &spec.params;
    let y = p[0] * spec.x + p[1];
    for (&a, &wa) in r.nodes.iter().zip(&r.weights) {
        let yt = y + a;
        // center z on its posterior mean; the offset is absorbed by ez
        let zc = p[2] * if spec.direct_y { y } else { yt } + p[3];
        let zc_ref = p[2] * y + p[3];
        for (&b, &wb) in r.nodes.iter().zip(&r.weights) {
            let ez = zc_ref + b - zc;
            let lw = spec.log_w(Noise::Uniform, a, ez);
            vals.push((wa * wb).ln() + lw);
        }
    }
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Closed form of [`log_evidence_box`] at `lambda = 0` when the `y` prior
/// scale does not depend on `z` (`h_s` weight zero): both box integrals of
/// interval probabilities reduce to antiderivatives.
pub fn lambda0_box_closed_form(spec: &MicroSpec) -> f64 {
    let p = &spec.params;
    assert!(spec.lambda == 0.0 && p[4] == 0.0, "closed form needs lambda = 0 and a fixed y prior");
    assert!(spec.direct_y, "closed form needs the z box independent of y~");
    let s = softplus_f64(p[5]) + crate::densities::SCALE_FLOOR;
    let y = p[0] * spec.x + p[1];
    // integral of Phi(u / s) du = s (t Phi(t) + phi(t)), t = u / s
    let g = |u: f64| {
        let t = u / s;
        s * (t * phi_cdf(t) + phi_pdf(t))
    };
    let iy = g(y + 1.0) - 2.0 * g(y) + g(y - 1.0);
    let a = softplus_f64(p[8]);
    let z = p[2] * y + p[3];
    // integral of sigmoid(a v + b) dv = softplus(a v + b) / a
    let h = |v: f64| softplus_f64(a * v + p[9]) / a;
    let iz = h(z + 1.0) - 2.0 * h(z) + h(z - 1.0);
    iy.ln() + iz.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(direct_y: bool) -> MicroSpec {
        MicroSpec { params: [1.3, 0.1, 0.8, -0.2, 0.5, 0.3, 0.9, 0.05, 0.4, 0.1], x: 0.7, lambda: 2e-4, direct_y }
    }

    #[test]
    fn dual_matches_finite_difference() {
        let s = spec(false);
        let d = s.log_w_dual(Noise::Uniform, 0.2, -0.3);
        for i in 0..NPARAM {
            let h = 1e-6;
            let (mut a, mut b) = (s.params, s.params);
            a[i] += h;
            b[i] -= h;
            let fd = (s.with_params(a).log_w(Noise::Uniform, 0.2, -0.3)
                - s.with_params(b).log_w(Noise::Uniform, 0.2, -0.3))
                / (2.0 * h);
            assert!((fd - d.d[i]).abs() < 1e-7 * fd.abs().max(1.0), "param {i}: {fd} vs {}", d.d[i]);
        }
    }

    #[test]
    fn laplace_route_matches_nested_quadrature() {
        let s = spec(false);
        let want = nested_paired_log_mean(&s, Noise::Uniform, 2, 10);
        let got = expected_log_mean(&s, Noise::Uniform, MicroBound::Paired, 2, 10).value;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        let k1 = expected_log_mean(&s, Noise::Uniform, MicroBound::Paired, 1, 10).value;
        assert!((k1 - nested_paired_log_mean(&s, Noise::Uniform, 1, 10)).abs() < 1e-12);
    }

    #[test]
    fn bounds_increase_towards_box_evidence() {
        let s = spec(true);
        let e = log_evidence_box(&s, 32).value;
        let mut last = f64::NEG_INFINITY;
        for k in [1, 2, 8, 64] {
            let v = expected_log_mean(&s, Noise::Uniform, MicroBound::SharedZ, k, 32).value;
            assert!(v > last && v < e, "k = {k}: {v}");
            last = v;
        }
        assert!(e <= log_evidence_full(&s, 40.0, 80));
    }

    #[test]
    fn lambda0_closed_form() {
        let mut s = spec(true);
        s.lambda = 0.0;
        s.params[4] = 0.0;
        let q = log_evidence_box(&s, 64).value;
        assert!((q - lambda0_box_closed_form(&s)).abs() < 1e-12);
        assert!(log_evidence_full(&s, 40.0, 80).abs() < 1e-10);
    }
}
