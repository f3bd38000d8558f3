//! Central finite-difference comparison against tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ProbeResult {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares the gradient of `f` at `inputs` with central differences of
/// step `h`. `probes` lists `(input, flat index)` coordinates; `None`
/// probes every coordinate.
pub fn check_gradient<F>(f: F, inputs: &[Tensor], h: f64, probes: Option<&[(usize, usize)]>) -> Result<Vec<ProbeResult>>
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backprop(&out)?;

    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
            &all
        }
    };
    let mut work = inputs.to_vec();
    let mut results = Vec::with_capacity(probes.len());
    for &(i, j) in probes {
        let x0 = work[i].data()[j];
        work[i].data_mut()[j] = x0 + h;
        let up = eval(&work);
        work[i].data_mut()[j] = x0 - h;
        let down = eval(&work);
        work[i].data_mut()[j] = x0;
        let analytic = grads.get(&vars[i]).map_or(0.0, |g| g.data()[j]);
        results.push(ProbeResult { input: i, index: j, analytic, numeric: (up - down) / (2.0 * h) });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ConvGeom, SeededRng};

    fn worst(results: &[ProbeResult]) -> f64 {
        results.iter().map(|r| r.rel_error(1e-6)).fold(0.0, f64::max)
    }

    #[test]
    fn three_layer_tanh_network() {
        let mut rng = SeededRng::new(42, 0);
        let inputs = vec![
            rng.normal(&[4, 5], 0.0, 1.0),
            rng.normal(&[5, 6], 0.0, 0.5),
            rng.normal(&[1, 6], 0.0, 0.5),
            rng.normal(&[6, 6], 0.0, 0.5),
            rng.normal(&[1, 6], 0.0, 0.5),
            rng.normal(&[6, 1], 0.0, 0.5),
        ];
        let f = |_: &Tape, v: &[Var]| {
            let h = v[0].matmul(&v[1]).add(&v[2]).tanh();
            let h = h.matmul(&v[3]).add(&v[4]).tanh();
            h.matmul(&v[5]).sum_all()
        };
        let r = check_gradient(f, &inputs, 1e-5, None).unwrap();
        assert!(worst(&r) <= 1e-4, "worst {}", worst(&r));
    }

    #[test]
    fn every_primitive() {
        let mut rng = SeededRng::new(9, 1);
        let a = rng.normal(&[3, 4], 0.0, 1.0);
        let b = rng.normal(&[1, 4], 0.0, 1.0).map(|v| v.abs() + 0.5);
        let f = |t: &Tape, v: &[Var]| {
            let x = &v[0];
            let y = &v[1];
            let parts = [
                x.add(y),
                x.sub(y).square(),
                x.mul(y).sin(),
                x.div(y).cos(),
                x.exp().scale(0.1),
                y.ln().expand(&[3, 4]),
                x.tanh().add_scalar(0.3),
                x.sigmoid(),
                x.softplus().abs(),
                x.softmax(1),
                x.log_mean_exp(0).reshape(&[1, 4]).expand(&[3, 4]),
                x.permute(&[1, 0]).permute(&[1, 0]).neg(),
                x.narrow(1, 1, 2).sum_axis(1).reshape(&[3, 1]).expand(&[3, 4]),
            ];
            let w = t.constant(Tensor::full(&[39, 4], 0.7));
            let c = Var::concat(&parts, 0);
            let lo = x.sub(&y.scale(0.5));
            let hi = x.add(&y.scale(0.5));
            let li = Var::ln_normal_interval(&lo, &hi).add(&Var::ln_sigmoid_interval(&lo, &hi));
            c.mul(&w).mean_all().add(&li.sum_all())
        };
        let r = check_gradient(f, &[a, b], 1e-5, None).unwrap();
        assert!(worst(&r) <= 1e-4, "worst {}", worst(&r));
    }

    #[test]
    fn conv_layers() {
        let mut rng = SeededRng::new(5, 2);
        let g = ConvGeom::new(4, 2, 1);
        let inputs = vec![
            rng.normal(&[2, 2, 8, 8], 0.0, 1.0),
            rng.normal(&[3, 2, 4, 4], 0.0, 0.3),
            rng.normal(&[3, 2, 4, 4], 0.0, 0.3),
        ];
        let f = move |_: &Tape, v: &[Var]| {
            let h = v[0].conv2d(&v[1], g).tanh();
            h.conv_transpose2d(&v[2], g).square().sum_all()
        };
        let r = check_gradient(f, &inputs, 1e-5, None).unwrap();
        assert!(worst(&r) <= 1e-4, "worst {}", worst(&r));
    }

    #[test]
    fn batched_products() {
        let mut rng = SeededRng::new(6, 0);
        let inputs = vec![rng.normal(&[2, 3, 4], 0.0, 1.0), rng.normal(&[2, 4, 2], 0.0, 1.0)];
        let f = |_: &Tape, v: &[Var]| v[0].bmm(&v[1]).tanh().sum_all();
        let r = check_gradient(f, &inputs, 1e-5, None).unwrap();
        assert!(worst(&r) <= 1e-4, "worst {}", worst(&r));
    }
}
