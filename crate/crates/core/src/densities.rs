//! Uniform-noise posteriors, the latent priors and their discretization.
//!
//! Integration windows are half-open: a value `v` owns `[v - 1/2, v + 1/2)`.

use crate::error::{Error, Result};
use crate::tensor::ops::{ln_normal_interval, ln_sigmoid_interval, normal_cdf, sigmoid, softplus};
use crate::tensor::{SeededRng, Tensor, Var};

/// Lower bound added to every predicted Gaussian scale.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Unit-width box posterior centred on an inference-network output.
#[derive(Clone, Debug)]
pub struct UniformPosterior {
    mean: Var,
}

impl UniformPosterior {
    pub fn new(mean: Var) -> Self {
        Self { mean }
    }

    pub fn mean(&self) -> &Var {
        &self.mean
    }

    pub fn width(&self) -> f64 {
        1.0
    }

    /// `mean + eps` with `eps` drawn uniformly from `[-1/2, 1/2)`.
    pub fn sample_noisy(&self, rng: &mut SeededRng) -> Var {
        let eps = rng.centered_tensor(self.mean.shape());
        self.sample_with(&eps)
    }

    /// `mean + eps` for caller-supplied noise of the same shape.
    pub fn sample_with(&self, eps: &Tensor) -> Var {
        assert_eq!(eps.shape(), self.mean.shape(), "noise shape");
        self.mean.add(&self.mean.tape().constant(eps.clone()))
    }

    /// Elementwise log-density: exactly `0.0` inside the support and
    /// `-inf` outside. The density is flat, so both the value and the mean
    /// receive a gradient of exactly zero.
    pub fn log_density(&self, value: &Var) -> Var {
        let m = self.mean.value();
        let v = value.value();
        let data = v
            .data()
            .iter()
            .zip(m.data())
            .map(|(&v, &m)| if v >= m - 0.5 && v < m + 0.5 { 0.0 } else { f64::NEG_INFINITY })
            .collect::<Vec<_>>();
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape checked by caller");
        let (vs, ms) = (v.shape().to_vec(), m.shape().to_vec());
        value.tape().push("uniform_log_density", &[value, &self.mean], out, move |_| {
            vec![Tensor::zeros(&vs), Tensor::zeros(&ms)]
        })
    }
}

/// Zero-mean Gaussian with per-dimension scale, discretized to unit bins.
#[derive(Clone, Debug)]
pub struct ConditionalGaussianPrior {
    scale: Var,
}

impl ConditionalGaussianPrior {
    /// Scales must already be positive.
    pub fn new(scale: Var) -> Self {
        Self { scale }
    }

    /// `softplus(raw) + SCALE_FLOOR`.
    pub fn from_raw(raw: &Var) -> Self {
        Self::new(raw.softplus().add_scalar(SCALE_FLOOR))
    }

    pub fn scale(&self) -> &Var {
        &self.scale
    }

    /// `ln[Phi((v + 1/2)/s) - Phi((v - 1/2)/s)]` per element. `value` may
    /// carry extra leading axes that broadcast against the scale.
    pub fn log_likelihood(&self, value: &Var) -> Var {
        let lo = value.add_scalar(-0.5).div(&self.scale);
        let hi = value.add_scalar(0.5).div(&self.scale);
        Var::ln_normal_interval(&lo, &hi)
    }
}

/// One stage of the cumulative map: `x -> g(softplus(M) x + b)`, with
/// `g(t) = t + tanh(a) * tanh(t)` on all but the last stage.
#[derive(Clone, Debug)]
pub struct CumulativeStage {
    /// Raw matrices `[C, out, in]`; the effective matrix is their softplus.
    pub matrix: Var,
    /// `[C, out, 1]`.
    pub bias: Var,
    /// `[C, out, 1]`, absent on the final stage.
    pub gate: Option<Var>,
}

/// Learned per-channel monotone CDF `C(v) = sigmoid(f(v))`.
#[derive(Clone, Debug)]
pub struct FactorizedCumulative {
    stages: Vec<CumulativeStage>,
}

/// Parameter shapes for a factorized cumulative with `stages` stages of
/// hidden width `width` over `channels` channels, in the order
/// `(matrix, bias, gate?)` per stage.
pub fn cumulative_shapes(channels: usize, stages: usize, width: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for s in 0..stages {
        let din = if s == 0 { 1 } else { width };
        let dout = if s + 1 == stages { 1 } else { width };
        out.push((format!("matrix{s}"), vec![channels, dout, din]));
        out.push((format!("bias{s}"), vec![channels, dout, 1]));
        if s + 1 < stages {
            out.push((format!("gate{s}"), vec![channels, dout, 1]));
        }
    }
    out
}

impl FactorizedCumulative {
    pub fn new(stages: Vec<CumulativeStage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::contract("factorized cumulative needs at least one stage"));
        }
        let last = stages.last().expect("nonempty");
        if last.gate.is_some() || last.matrix.shape()[1] != 1 {
            return Err(Error::contract("final cumulative stage must map to one value without gate"));
        }
        Ok(Self { stages })
    }

    /// Builds from vars ordered as in [`cumulative_shapes`].
    pub fn from_vars(vars: &[Var], stages: usize) -> Result<Self> {
        let mut it = vars.iter();
        let mut out = Vec::with_capacity(stages);
        for s in 0..stages {
            let mut next = || it.next().cloned().ok_or_else(|| Error::contract("too few prior parameters"));
            let matrix = next()?;
            let bias = next()?;
            let gate = if s + 1 < stages { Some(next()?) } else { None };
            out.push(CumulativeStage { matrix, bias, gate });
        }
        Self::new(out)
    }

    pub fn channels(&self) -> usize {
        self.stages[0].matrix.shape()[0]
    }

    /// Pre-sigmoid values `f(v)` for `v: [C, N]`.
    pub fn logits(&self, v: &Var) -> Var {
        let (c, n) = (v.shape()[0], v.shape()[1]);
        assert_eq!(c, self.channels(), "channel count");
        let mut x = v.reshape(&[c, 1, n]);
        for st in &self.stages {
            x = st.matrix.softplus().bmm(&x).add(&st.bias);
            if let Some(gate) = &st.gate {
                x = x.add(&gate.tanh().mul(&x.tanh()));
            }
        }
        x.reshape(&[c, n])
    }

    /// Per-element `ln[C(v + 1/2) - C(v - 1/2)]`. The channel axis of
    /// `value` is third from the end (`[..., C, H, W]`).
    pub fn log_likelihood(&self, value: &Var) -> Var {
        let shape = value.shape().to_vec();
        let nd = shape.len();
        assert!(nd >= 3, "expected [..., C, H, W], got {shape:?}");
        let caxis = nd - 3;
        let mut perm = vec![caxis];
        perm.extend((0..nd).filter(|&d| d != caxis));
        let c = shape[caxis];
        let n = value.value().len() / c;
        let flat = value.permute(&perm).reshape(&[c, n]);
        let lo = self.logits(&flat.add_scalar(-0.5));
        let hi = self.logits(&flat.add_scalar(0.5));
        let ll = Var::ln_sigmoid_interval(&lo, &hi);
        let permuted: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut inv = vec![0; nd];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        ll.reshape(&permuted).permute(&inv)
    }

    /// Plain-value view of one channel for discretization.
    pub fn channel_cdf(&self, channel: usize) -> ChannelCdf {
        let stages = self
            .stages
            .iter()
            .map(|st| {
                let m = st.matrix.value();
                let (dout, din) = (m.shape()[1], m.shape()[2]);
                let off = channel * dout * din;
                ScalarStage {
                    matrix: m.data()[off..off + dout * din].iter().map(|&v| softplus(v)).collect(),
                    bias: st.bias.value().data()[channel * dout..(channel + 1) * dout].to_vec(),
                    gate: st.gate.as_ref().map(|g| {
                        g.value().data()[channel * dout..(channel + 1) * dout].iter().map(|v| v.tanh()).collect()
                    }),
                    dout,
                    din,
                }
            })
            .collect();
        ChannelCdf { stages }
    }
}

#[derive(Clone, Debug)]
struct ScalarStage {
    matrix: Vec<f64>,
    bias: Vec<f64>,
    gate: Option<Vec<f64>>,
    dout: usize,
    din: usize,
}

/// A scalar CDF evaluated without the tape.
pub trait ScalarCdf {
    fn cdf(&self, x: f64) -> f64;
    /// `1 - cdf(x)`, accurate in the upper tail.
    fn sf(&self, x: f64) -> f64;
    /// `ln(cdf(hi) - cdf(lo))`.
    fn ln_interval(&self, lo: f64, hi: f64) -> f64;
}

/// One channel of a [`FactorizedCumulative`].
#[derive(Clone, Debug)]
pub struct ChannelCdf {
    stages: Vec<ScalarStage>,
}

impl ChannelCdf {
    pub fn logit(&self, x: f64) -> f64 {
        let mut h = vec![x];
        for st in &self.stages {
            let mut next = st.bias.clone();
            for (o, n) in next.iter_mut().enumerate() {
                for (i, hv) in h.iter().enumerate() {
                    *n += st.matrix[o * st.din + i] * hv;
                }
            }
            if let Some(g) = &st.gate {
                for (n, a) in next.iter_mut().zip(g) {
                    *n += a * n.tanh();
                }
            }
            debug_assert_eq!(next.len(), st.dout);
            h = next;
        }
        h[0]
    }
}

impl ScalarCdf for ChannelCdf {
    fn cdf(&self, x: f64) -> f64 {
        sigmoid(self.logit(x))
    }

    fn sf(&self, x: f64) -> f64 {
        sigmoid(-self.logit(x))
    }

    fn ln_interval(&self, lo: f64, hi: f64) -> f64 {
        ln_sigmoid_interval(self.logit(lo), self.logit(hi))
    }
}

/// Zero-mean Gaussian with scale `sigma`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianCdf {
    pub sigma: f64,
}

impl ScalarCdf for GaussianCdf {
    fn cdf(&self, x: f64) -> f64 {
        normal_cdf(x / self.sigma)
    }

    fn sf(&self, x: f64) -> f64 {
        normal_cdf(-x / self.sigma)
    }

    fn ln_interval(&self, lo: f64, hi: f64) -> f64 {
        ln_normal_interval(lo / self.sigma, hi / self.sigma)
    }
}

/// Integer-support PMF with an escape symbol for the tails, plus its
/// fixed-point quantization for the range coder.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegerPmf {
    pub lo: i64,
    pub hi: i64,
    /// Mass of each symbol in `lo..=hi`.
    pub probabilities: Vec<f64>,
    /// Mass outside `[lo - 1/2, hi + 1/2)`.
    pub tail_mass: f64,
    /// Counts for `lo..=hi` followed by the escape count; they sum to
    /// `1 << precision_bits` and none is zero.
    pub counts: Vec<u32>,
    pub precision_bits: u32,
}

/// Largest support size a PMF may use, leaving room in the count table.
const MAX_SUPPORT: i64 = 1 << 12;

impl IntegerPmf {
    pub fn escape_index(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn total(&self) -> u64 {
        1u64 << self.precision_bits
    }

    /// Index of `symbol` in the count table, or `None` if it must escape.
    pub fn index_of(&self, symbol: i64) -> Option<usize> {
        (self.lo..=self.hi).contains(&symbol).then(|| (symbol - self.lo) as usize)
    }

    /// Shannon entropy in bits of the float masses, tail included as one
    /// outcome.
    pub fn entropy_bits(&self) -> f64 {
        self.probabilities
            .iter()
            .chain(std::iter::once(&self.tail_mass))
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum()
    }

    /// Ideal code length in bits for the count at `index`.
    pub fn code_length_bits(&self, index: usize) -> f64 {
        self.precision_bits as f64 - (self.counts[index] as f64).log2()
    }
}

/// Finds `x` with `cdf(x) ~= p` by bisection.
pub fn quantile(prior: &dyn ScalarCdf, p: f64) -> f64 {
    let (mut lo, mut hi) = (-1.0, 1.0);
    while prior.cdf(lo) > p && lo > -1e12 {
        lo *= 2.0;
    }
    while prior.cdf(hi) < p && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if prior.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Discretizes `prior` onto the integers `n` (representing values
/// `n + offset`), keeping the central `support_quantile` of the mass and
/// sending the rest to an escape symbol.
pub fn discretize(
    prior: &dyn ScalarCdf,
    offset: f64,
    support_quantile: f64,
    precision_bits: u32,
) -> Result<IntegerPmf> {
    if !(support_quantile > 0.0 && support_quantile < 1.0) {
        return Err(Error::contract(format!("support quantile {support_quantile} outside (0, 1)")));
    }
    if !(8..=24).contains(&precision_bits) {
        return Err(Error::contract(format!("precision {precision_bits} outside [8, 24]")));
    }
    let tail = 0.5 * (1.0 - support_quantile);
    let qlo = quantile(prior, tail);
    let qhi = quantile(prior, 1.0 - tail);
    if !(qlo.is_finite() && qhi.is_finite()) || qhi - qlo <= 0.0 {
        return Err(Error::contract("degenerate prior: zero-width support"));
    }
    let mut lo = (qlo - offset).round() as i64;
    let mut hi = (qhi - offset).round() as i64;
    if hi - lo + 1 > MAX_SUPPORT {
        let mid = (lo + hi) / 2;
        lo = mid - MAX_SUPPORT / 2;
        hi = lo + MAX_SUPPORT - 1;
    }
    let probabilities: Vec<f64> = (lo..=hi)
        .map(|n| {
            let c = n as f64 + offset;
            prior.ln_interval(c - 0.5, c + 0.5).exp()
        })
        .collect();
    let below = prior.cdf(lo as f64 + offset - 0.5);
    let above = prior.sf(hi as f64 + offset + 0.5);
    let tail_mass = below + above;
    if probabilities.iter().any(|p| !p.is_finite()) || !tail_mass.is_finite() {
        return Err(Error::contract("degenerate prior: non-finite mass"));
    }
    let counts = quantize_counts(&probabilities, tail_mass, precision_bits);
    Ok(IntegerPmf { lo, hi, probabilities, tail_mass, counts, precision_bits })
}

/// Largest-remainder rounding of `probs ++ [tail]` onto `2^bits` counts,
/// each at least one.
fn quantize_counts(probs: &[f64], tail: f64, bits: u32) -> Vec<u32> {
    let total = 1u64 << bits;
    let masses: Vec<f64> = probs.iter().copied().chain(std::iter::once(tail)).collect();
    let n = masses.len() as u64;
    assert!(n < total, "support too large for precision");
    let norm: f64 = masses.iter().sum();
    let spare = (total - n) as f64;
    let mut counts = Vec::with_capacity(masses.len());
    let mut fracs = Vec::with_capacity(masses.len());
    for (i, m) in masses.iter().enumerate() {
        let x = m / norm * spare;
        let f = x.floor();
        counts.push(1 + f as u64);
        fracs.push((x - f, i));
    }
    let used: u64 = counts.iter().sum();
    let mut left = total - used;
    fracs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in fracs.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.into_iter().map(|c| c as u32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn sample_lies_in_support_with_identity_jacobian() {
        let tape = Tape::new();
        let mean = tape.param("m", Tensor::zeros(&[64]));
        let q = UniformPosterior::new(mean);
        let mut rng = SeededRng::new(0, 0);
        let s = q.sample_noisy(&mut rng);
        assert!(s.value().data().iter().all(|&v| (-0.5..0.5).contains(&v)));
        let lq = q.log_density(&s);
        assert!(lq.value().data().iter().all(|&v| v.to_bits() == 0.0f64.to_bits()));
        let g = tape.backprop(&s.sum_all()).unwrap();
        assert_eq!(g.param("m").unwrap().data(), &[1.0; 64]);
    }

    #[test]
    fn window_is_half_open() {
        let tape = Tape::no_grad();
        let q = UniformPosterior::new(tape.constant(Tensor::vector(&[0.0, 0.0])));
        let v = tape.constant(Tensor::vector(&[-0.5, 0.5]));
        let d = q.log_density(&v);
        assert_eq!(d.value().data(), &[0.0, f64::NEG_INFINITY]);
    }

    #[test]
    fn unit_gaussian_at_zero() {
        let tape = Tape::no_grad();
        let p = ConditionalGaussianPrior::new(tape.constant(Tensor::vector(&[1.0])));
        let ll = p.log_likelihood(&tape.constant(Tensor::vector(&[0.0]))).item();
        assert!((ll - 0.3829249225480262f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn floor_scale_captures_all_mass() {
        let tape = Tape::no_grad();
        let p = ConditionalGaussianPrior::from_raw(&tape.constant(Tensor::vector(&[-800.0])));
        assert!((p.scale().item() - SCALE_FLOOR).abs() < 1e-20);
        let ll = p.log_likelihood(&tape.constant(Tensor::vector(&[0.0]))).item();
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn gaussian_pmf_support_and_counts() {
        let pmf = discretize(&GaussianCdf { sigma: 1.0 }, 0.0, 0.9999, 16).unwrap();
        assert!(pmf.lo >= -5 && pmf.hi <= 5);
        let sum: u64 = pmf.counts.iter().map(|&c| c as u64).sum();
        assert_eq!(sum, 1 << 16);
        assert!(pmf.counts.iter().all(|&c| c >= 1));
        let mass: f64 = pmf.probabilities.iter().sum::<f64>() + pmf.tail_mass;
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_arguments() {
        let g = GaussianCdf { sigma: 1.0 };
        assert!(discretize(&g, 0.0, 1.0, 16).is_err());
        assert!(discretize(&g, 0.0, 0.99, 30).is_err());
        assert!(discretize(&GaussianCdf { sigma: 0.0 }, 0.0, 0.99, 16).is_err());
    }

    #[test]
    fn logistic_single_stage_matches_closed_form() {
        let tape = Tape::no_grad();
        let raw = 0.3f64;
        let vars = [
            tape.constant(Tensor::new(vec![1, 1, 1], vec![raw]).unwrap()),
            tape.constant(Tensor::new(vec![1, 1, 1], vec![0.2]).unwrap()),
        ];
        let fc = FactorizedCumulative::from_vars(&vars, 1).unwrap();
        let v = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![0.4]).unwrap());
        let ll = fc.log_likelihood(&v).item();
        let a = softplus(raw);
        let want = (sigmoid(a * 0.9 + 0.2) - sigmoid(a * -0.1 + 0.2)).ln();
        assert!((ll - want).abs() < 1e-14);
        let cdf = fc.channel_cdf(0);
        assert!((cdf.ln_interval(-0.1, 0.9) - want).abs() < 1e-14);
    }
}
