//! Differentiable primitives on [`Var`].
//!
//! Shape errors in this module are programming errors and panic with the
//! offending shapes; fallible model-level entry points check shapes first.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};
use std::rc::Rc;

use super::array::{broadcast_offsets, broadcast_shape, numel, reduce_to_shape, split_axis};
use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Smallest interval probability represented before clamping.
pub const PROB_FLOOR: f64 = 1e-300;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn ln_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `ln(Phi(b) - Phi(a))` for `a <= b`, evaluated on whichever tail keeps
/// the subtraction well conditioned.
pub fn ln_normal_interval(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        return ln_normal_interval(-b, -a);
    }
    if b >= 0.0 {
        return (normal_cdf(b) - normal_cdf(a)).ln();
    }
    // both below zero: factor out the larger lower-tail mass
    let hi = 0.5 * libm::erfc(-b * FRAC_1_SQRT_2);
    let lo = 0.5 * libm::erfc(-a * FRAC_1_SQRT_2);
    if hi == 0.0 {
        return f64::NEG_INFINITY;
    }
    hi.ln() + (-lo / hi).ln_1p()
}

/// `ln(sigmoid(b) - sigmoid(a))` for `a <= b`.
pub fn ln_sigmoid_interval(a: f64, b: f64) -> f64 {
    -softplus(-b) - softplus(a) + (-(a - b).exp_m1()).ln()
}

/// Row-major permutation of a tensor's axes: output axis `i` is input axis
/// `perm[i]`.
pub fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len(), "permute rank mismatch");
    let n = shape.len();
    let mut in_strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = t.len();
    let src = t.data();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        data.push(src[off]);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Stable `log(mean(exp(v)))` along `axis`; the axis is removed.
/// A slice of all `-inf` yields `-inf`.
pub fn log_mean_exp(values: &Tensor, axis: usize) -> Tensor {
    let (_, dim, _) = split_axis(values.shape(), axis);
    let lse = log_sum_exp(values, axis);
    lse.map(|v| v - (dim as f64).ln())
}

pub fn log_sum_exp(values: &Tensor, axis: usize) -> Tensor {
    let (outer, dim, inner) = split_axis(values.shape(), axis);
    let src = values.data();
    let mut out = Vec::with_capacity(outer * inner);
    let mut buf = vec![0.0; dim];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| src[(o * dim + j) * inner + i];
            let m = (0..dim).map(at).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                out.push(f64::NEG_INFINITY);
                continue;
            }
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (at(j) - m).exp();
            }
            out.push(m + super::pairwise_sum(&buf).ln());
        }
    }
    let mut shape = values.shape().to_vec();
    shape.remove(axis);
    Tensor::from_parts(shape, out)
}

/// Softmax along `axis`. Slices that are entirely `-inf` map to zeros.
pub fn softmax_tensor(values: &Tensor, axis: usize) -> Tensor {
    let (outer, dim, inner) = split_axis(values.shape(), axis);
    let src = values.data();
    let mut data = vec![0.0; src.len()];
    let mut buf = vec![0.0; dim];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * dim + j) * inner + i;
            let m = (0..dim).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (src[idx(j)] - m).exp();
            }
            let s = super::pairwise_sum(&buf);
            for (j, b) in buf.iter().enumerate() {
                data[idx(j)] = b / s;
            }
        }
    }
    Tensor::from_parts(values.shape().to_vec(), data)
}

fn sum_axis_tensor(t: &Tensor, axis: usize) -> Tensor {
    let (outer, dim, inner) = split_axis(t.shape(), axis);
    let src = t.data();
    let mut out = vec![0.0; outer * inner];
    let mut buf = vec![0.0; dim];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = src[(o * dim + j) * inner + i];
            }
            out[o * inner + i] = super::pairwise_sum(&buf);
        }
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Tensor::from_parts(shape, out)
}

/// Inserts a unit axis at `axis` and repeats it `dim` times.
fn repeat_axis(t: &Tensor, axis: usize, dim: usize) -> Tensor {
    let mut kshape = t.shape().to_vec();
    kshape.insert(axis, 1);
    let mut out_shape = kshape.clone();
    out_shape[axis] = dim;
    let offsets = broadcast_offsets(&kshape, &out_shape);
    let src = t.data();
    Tensor::from_parts(out_shape, offsets.iter().map(|&o| src[o]).collect())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let n = t.ndim();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.swap(n - 2, n - 1);
    permute_tensor(t, &perm)
}

fn bmm_tensor(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1], "bmm shapes {sa:?} x {sb:?}");
    let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
    let mut out = vec![0.0; nb * m * n];
    for i in 0..nb {
        matmul_raw(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Tensor::from_parts(vec![nb, m, n], out)
}

impl Var {
    fn unary(&self, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let x = self.value_rc();
        let y = Rc::new(x.map(f));
        let yb = Rc::clone(&y);
        self.tape().push(op, &[self], y, move |g| {
            let data = g.data().iter().zip(x.data().iter().zip(yb.data())).map(|(g, (&x, &y))| g * df(x, y)).collect();
            vec![Tensor::from_parts(x.shape().to_vec(), data)]
        })
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Var {
        let (a, b) = (self.value_rc(), other.value_rc());
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .unwrap_or_else(|| panic!("{op}: cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
        let oa = broadcast_offsets(a.shape(), &out_shape);
        let ob = broadcast_offsets(b.shape(), &out_shape);
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
        let value = Tensor::from_parts(out_shape.clone(), data);
        self.tape().push(op, &[self, other], value, move |g| {
            let ad = a.data();
            let bd = b.data();
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for ((&gv, &i), &j) in g.data().iter().zip(&oa).zip(&ob) {
                ga.push(gv * da(ad[i], bd[j]));
                gb.push(gv * db(ad[i], bd[j]));
            }
            vec![
                reduce_to_shape(&Tensor::from_parts(out_shape.clone(), ga), a.shape()),
                reduce_to_shape(&Tensor::from_parts(out_shape.clone(), gb), b.shape()),
            ]
        })
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Var {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(&self) -> Var {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Var {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn square(&self) -> Var {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sin(&self) -> Var {
        self.unary("sin", f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Var {
        self.unary("cos", f64::cos, |x, _| -x.sin())
    }

    pub fn sum_all(&self) -> Var {
        let x = self.value_rc();
        let value = Tensor::scalar(x.sum());
        self.tape().push("sum_all", &[self], value, move |g| vec![Tensor::full(x.shape(), g.item())])
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let x = self.value_rc();
        let dim = x.shape()[axis];
        let value = sum_axis_tensor(&x, axis);
        self.tape().push("sum_axis", &[self], value, move |g| vec![repeat_axis(g, axis, dim)])
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let dim = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / dim)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let x = self.value_rc();
        assert_eq!(numel(shape), x.len(), "reshape {:?} -> {:?}", x.shape(), shape);
        let in_shape = x.shape().to_vec();
        let value = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        self.tape()
            .push("reshape", &[self], value, move |g| vec![Tensor::from_parts(in_shape.clone(), g.data().to_vec())])
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        let value = permute_tensor(self.value(), perm);
        let inv = inverse_perm(perm);
        self.tape().push("permute", &[self], value, move |g| vec![permute_tensor(g, &inv)])
    }

    /// Broadcasts to `shape` under the usual right-aligned rules.
    pub fn expand(&self, shape: &[usize]) -> Var {
        let x = self.value_rc();
        let target = broadcast_shape(x.shape(), shape);
        assert_eq!(target.as_deref(), Some(shape), "expand {:?} -> {:?}", x.shape(), shape);
        let offsets = broadcast_offsets(x.shape(), shape);
        let value = Tensor::from_parts(shape.to_vec(), offsets.iter().map(|&o| x.data()[o]).collect());
        self.tape().push("expand", &[self], value, move |g| vec![reduce_to_shape(g, x.shape())])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let x = self.value_rc();
        let value = x.narrow(axis, start, len);
        let in_shape = x.shape().to_vec();
        self.tape().push("narrow", &[self], value, move |g| {
            let (outer, dim, inner) = split_axis(&in_shape, axis);
            let mut data = vec![0.0; numel(&in_shape)];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let base = (o * dim + start) * inner;
                data[base..base + len * inner].copy_from_slice(src);
            }
            vec![Tensor::from_parts(in_shape.clone(), data)]
        })
    }

    /// Joins along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape().to_vec();
        let lens: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert!(
                    s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b),
                    "concat shapes {first:?} and {s:?}"
                );
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.value().data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let refs: Vec<&Var> = parts.iter().collect();
        parts[0].tape().push("concat", &refs, Tensor::from_parts(shape, data), move |g| {
            let mut start = 0;
            lens.iter()
                .map(|&len| {
                    let piece = g.narrow(axis, start, len);
                    start += len;
                    piece
                })
                .collect()
        })
    }

    /// Stable `log(sum(exp(v)))` along `axis`; the axis is removed.
    pub fn log_sum_exp(&self, axis: usize) -> Var {
        let x = self.value_rc();
        let value = log_sum_exp(&x, axis);
        let dim = x.shape()[axis];
        self.tape().push("log_sum_exp", &[self], value, move |g| {
            let w = softmax_tensor(&x, axis);
            let gx = repeat_axis(g, axis, dim);
            vec![w.zip_map(&gx, |w, g| if w == 0.0 { 0.0 } else { w * g })]
        })
    }

    pub fn log_mean_exp(&self, axis: usize) -> Var {
        let dim = self.shape()[axis] as f64;
        self.log_sum_exp(axis).add_scalar(-dim.ln())
    }

    pub fn softmax(&self, axis: usize) -> Var {
        let y = Rc::new(softmax_tensor(self.value(), axis));
        let yb = Rc::clone(&y);
        let dim = self.shape()[axis];
        self.tape().push("softmax", &[self], y, move |g| {
            let gy = g.zip_map(&yb, |g, y| g * y);
            let s = repeat_axis(&sum_axis_tensor(&gy, axis), axis, dim);
            let data = gy.data().iter().zip(yb.data().iter().zip(s.data())).map(|(&gy, (&y, &s))| gy - y * s).collect();
            vec![Tensor::from_parts(g.shape().to_vec(), data)]
        })
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var {
        self.tape().constant_rc(self.value_rc())
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-d operands");
        self.reshape(&[1, sa[0], sa[1]]).bmm(&other.reshape(&[1, sb[0], sb[1]])).reshape(&[sa[0], sb[1]])
    }

    /// Batched product `[n, m, k] x [n, k, p] -> [n, m, p]`.
    pub fn bmm(&self, other: &Var) -> Var {
        let (a, b) = (self.value_rc(), other.value_rc());
        let value = bmm_tensor(&a, &b);
        self.tape().push("bmm", &[self, other], value, move |g| {
            vec![bmm_tensor(g, &transpose_last2(&b)), bmm_tensor(&transpose_last2(&a), g)]
        })
    }

    /// Elementwise `ln(Phi(hi) - Phi(lo))` for standard normal `Phi`,
    /// clamped at [`PROB_FLOOR`]; clamped entries bump the tape's
    /// saturation counter and pass no gradient.
    pub fn ln_normal_interval(lo: &Var, hi: &Var) -> Var {
        Self::interval(lo, hi, "ln_normal_interval", ln_normal_interval, |a, b, lp| {
            let da = -(ln_normal_pdf(a) - lp).exp();
            let db = (ln_normal_pdf(b) - lp).exp();
            (da, db)
        })
    }

    /// Elementwise `ln(sigmoid(hi) - sigmoid(lo))`, clamped like
    /// [`Var::ln_normal_interval`].
    pub fn ln_sigmoid_interval(lo: &Var, hi: &Var) -> Var {
        Self::interval(lo, hi, "ln_sigmoid_interval", ln_sigmoid_interval, |a, b, _| {
            let r = 1.0 / (b - a).exp_m1();
            (-sigmoid(a) - r, sigmoid(-b) + r)
        })
    }

    fn interval(
        lo: &Var,
        hi: &Var,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        grad: fn(f64, f64, f64) -> (f64, f64),
    ) -> Var {
        assert_eq!(lo.shape(), hi.shape(), "{op}: bound shapes differ");
        let (a, b) = (lo.value_rc(), hi.value_rc());
        let floor = PROB_FLOOR.ln();
        let mut saturated = 0;
        let y: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&a, &b)| {
                let v = f(a, b);
                if v >= floor {
                    v
                } else {
                    saturated += 1;
                    floor
                }
            })
            .collect();
        lo.tape().note_saturations(saturated);
        let y = Rc::new(Tensor::from_parts(a.shape().to_vec(), y));
        let yb = Rc::clone(&y);
        lo.tape().push(op, &[lo, hi], y, move |g| {
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for (i, &gv) in g.data().iter().enumerate() {
                let lp = yb.data()[i];
                if lp <= floor {
                    ga.push(0.0);
                    gb.push(0.0);
                } else {
                    let (da, db) = grad(a.data()[i], b.data()[i], lp);
                    ga.push(gv * da);
                    gb.push(gv * db);
                }
            }
            let shape = a.shape().to_vec();
            vec![Tensor::from_parts(shape.clone(), ga), Tensor::from_parts(shape, gb)]
        })
    }
}

/// `w_i / sum_j w_j` along `axis`, computed from log-weights.
///
/// With `detach` set the result is a constant on the tape.
pub fn normalized_weights(log_w: &Var, axis: usize, detach: bool) -> Result<Var> {
    let lse = log_sum_exp(log_w.value(), axis);
    if lse.data().contains(&f64::NEG_INFINITY) {
        return Err(Error::DegenerateWeights);
    }
    let w = log_w.softmax(axis);
    Ok(if detach { w.detach() } else { w })
}

/// Nats to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(3.0));
        let y = x.mul(&x);
        let g = tape.backprop(&y).unwrap();
        assert_eq!(g.param("x").unwrap().item(), 6.0);
    }

    #[test]
    fn linear_sum_gradient_is_column_sum() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tape = Tape::new();
        let x = tape.param("x", Tensor::new(vec![3, 1], vec![0.3, -0.2, 0.7]).unwrap());
        let y = tape.constant(a).matmul(&x).sum_all();
        let g = tape.backprop(&y).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn second_backprop_is_rejected() {
        let tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(1.0));
        let y = x.exp();
        tape.backprop(&y).unwrap();
        assert!(tape.backprop(&y).is_err());
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::new();
        let x = tape.param("x", Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backprop(&x.exp()), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_in_backward_reports_node() {
        let tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(-1.0));
        let y = x.ln();
        let id = y.id();
        match tape.backprop(&y.sum_all().mul(&tape.constant(Tensor::scalar(f64::NAN)))) {
            Err(Error::Numeric { node, .. }) => assert!(node >= id),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn visit_order_is_reverse_insertion() {
        let tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(0.5));
        let y = x.tanh().exp().mul(&x).sum_all();
        let g = tape.backprop(&y).unwrap();
        let order = g.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.len(), tape.len());
    }

    #[test]
    fn unreached_param_gets_zeros() {
        let tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(0.5));
        let _unused = tape.param("w", Tensor::zeros(&[2, 2]));
        let g = tape.backprop(&x.square()).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn no_grad_tape_matches_values() {
        let build = |tape: &Tape| {
            let x = tape.param("x", Tensor::vector(&[0.1, -2.0, 3.5]));
            x.tanh().softplus().log_mean_exp(0).item()
        };
        let a = build(&Tape::new());
        let b = build(&Tape::no_grad());
        assert_eq!(a.to_bits(), b.to_bits());
        let t = Tape::no_grad();
        assert!(!t.param("x", Tensor::scalar(1.0)).requires_grad());
    }

    #[test]
    fn lme_examples() {
        let t = Tensor::vector(&[-7.25, -7.25, -7.25]);
        assert_eq!(log_mean_exp(&t, 0).item(), -7.25);
        let t = Tensor::vector(&[0.0, 3f64.ln()]);
        assert!((log_mean_exp(&t, 0).item() - 2f64.ln()).abs() < 1e-15);
        let t = Tensor::vector(&[f64::NEG_INFINITY; 4]);
        assert_eq!(log_mean_exp(&t, 0).item(), f64::NEG_INFINITY);
        let t = Tensor::vector(&[800.0, 799.0]);
        assert!(log_mean_exp(&t, 0).item().is_finite());
    }

    #[test]
    fn lme_gradient_ignores_neg_inf_entries() {
        let tape = Tape::new();
        let x = tape.param("x", Tensor::vector(&[0.0, f64::NEG_INFINITY, 0.0]));
        let g = tape.backprop(&x.log_mean_exp(0)).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn weights_examples() {
        let tape = Tape::new();
        let lw = tape.constant(Tensor::vector(&[0.0, 3f64.ln()]));
        let w = normalized_weights(&lw, 0, true).unwrap();
        assert!(close(w.value().data()[0], 0.25, 1e-15));
        assert!(close(w.value().data()[1], 0.75, 1e-15));
        let lw = tape.constant(Tensor::vector(&[f64::NEG_INFINITY; 3]));
        assert!(matches!(normalized_weights(&lw, 0, true), Err(Error::DegenerateWeights)));
    }

    #[test]
    fn detached_weights_pass_no_gradient() {
        let tape = Tape::new();
        let x = tape.param("x", Tensor::vector(&[0.3, -1.0, 2.0]));
        let w = normalized_weights(&x, 0, true).unwrap();
        assert!(!w.requires_grad());
        let g = tape.backprop(&w.mul(&x).sum_all()).unwrap();
        assert_eq!(g.param("x").unwrap().data(), w.value().data());
    }

    #[test]
    fn interval_helpers_match_direct_evaluation() {
        let direct = normal_cdf(0.5) - normal_cdf(-0.5);
        assert!((ln_normal_interval(-0.5, 0.5) - direct.ln()).abs() < 1e-15);
        let direct = normal_cdf(-2.0) - normal_cdf(-3.0);
        assert!((ln_normal_interval(-3.0, -2.0) - direct.ln()).abs() < 1e-13);
        assert!((ln_normal_interval(2.0, 3.0) - ln_normal_interval(-3.0, -2.0)).abs() < 1e-15);
        let direct = sigmoid(1.3) - sigmoid(0.2);
        assert!((ln_sigmoid_interval(0.2, 1.3) - direct.ln()).abs() < 1e-14);
        // far tail, where the direct difference would be zero
        assert!(ln_normal_interval(30.0, 31.0).is_finite());
        assert!(ln_sigmoid_interval(60.0, 61.0).is_finite());
    }

    #[test]
    fn saturated_interval_is_counted() {
        let tape = Tape::new();
        let lo = tape.leaf(Tensor::vector(&[1e5, -0.5]));
        let hi = tape.leaf(Tensor::vector(&[1e5 + 1.0, 0.5]));
        let y = Var::ln_normal_interval(&lo, &hi);
        assert_eq!(tape.saturation_count(), 1);
        assert_eq!(y.value().data()[0], PROB_FLOOR.ln());
        let g = tape.backprop(&y.sum_all()).unwrap();
        assert_eq!(g.get(&lo).unwrap().data()[0], 0.0);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], 4.0);
        assert_eq!(permute_tensor(&p, &inverse_perm(&[2, 0, 1])), t);
    }
}
