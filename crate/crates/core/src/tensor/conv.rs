//! Strided 2-d convolution and its transpose.
//!
//! Both directions share three kernels: `gather` (a forward convolution),
//! `scatter` (its adjoint in the input) and `weight_grad`.

use super::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    /// Spatial size after a forward convolution, `None` if it does not tile.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        let span = (n + 2 * self.pad).checked_sub(self.kernel)?;
        (span % self.stride == 0).then_some(span / self.stride + 1)
    }

    /// Spatial size after a transposed convolution.
    pub fn transpose_out(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// `small[b, a, i, j] = sum big[b, c, i*s - p + u, j*s - p + v] * w[a, c, u, v]`
fn gather(big: &Tensor, w: &Tensor, g: ConvGeom, out_hw: (usize, usize)) -> Tensor {
    let [nb, nc, h, wd] = dims4(big);
    let [na, wc, k, _] = dims4(w);
    assert_eq!(nc, wc, "channel mismatch: input {nc}, weight {wc}");
    let (oh, ow) = out_hw;
    let x = big.data();
    let wt = w.data();
    let mut out = vec![0.0; nb * na * oh * ow];
    for b in 0..nb {
        for a in 0..na {
            let dst = &mut out[(b * na + a) * oh * ow..(b * na + a + 1) * oh * ow];
            for c in 0..nc {
                let src = &x[(b * nc + c) * h * wd..(b * nc + c + 1) * h * wd];
                let wk = &wt[(a * nc + c) * k * k..(a * nc + c + 1) * k * k];
                for u in 0..k {
                    for v in 0..k {
                        let wv = wk[u * k + v];
                        for i in 0..oh {
                            let r = (i * g.stride + u) as isize - g.pad as isize;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            let row = &src[r as usize * wd..(r as usize + 1) * wd];
                            let drow = &mut dst[i * ow..(i + 1) * ow];
                            for (j, d) in drow.iter_mut().enumerate() {
                                let col = (j * g.stride + v) as isize - g.pad as isize;
                                if col >= 0 && col < wd as isize {
                                    *d += wv * row[col as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![nb, na, oh, ow], out)
}

/// Adjoint of [`gather`] in its first argument.
fn scatter(small: &Tensor, w: &Tensor, g: ConvGeom, big_hw: (usize, usize)) -> Tensor {
    let [nb, na, oh, ow] = dims4(small);
    let [wa, nc, k, _] = dims4(w);
    assert_eq!(na, wa, "channel mismatch: input {na}, weight {wa}");
    let (h, wd) = big_hw;
    let y = small.data();
    let wt = w.data();
    let mut out = vec![0.0; nb * nc * h * wd];
    for b in 0..nb {
        for a in 0..na {
            let src = &y[(b * na + a) * oh * ow..(b * na + a + 1) * oh * ow];
            for c in 0..nc {
                let dst = &mut out[(b * nc + c) * h * wd..(b * nc + c + 1) * h * wd];
                let wk = &wt[(a * nc + c) * k * k..(a * nc + c + 1) * k * k];
                for u in 0..k {
                    for v in 0..k {
                        let wv = wk[u * k + v];
                        for i in 0..oh {
                            let r = (i * g.stride + u) as isize - g.pad as isize;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            let drow = &mut dst[r as usize * wd..(r as usize + 1) * wd];
                            for j in 0..ow {
                                let col = (j * g.stride + v) as isize - g.pad as isize;
                                if col >= 0 && col < wd as isize {
                                    drow[col as usize] += wv * src[i * ow + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![nb, nc, h, wd], out)
}

/// Gradient of `gather(big, w)` with respect to `w`, given the output
/// gradient `small`.
fn weight_grad(big: &Tensor, small: &Tensor, g: ConvGeom) -> Tensor {
    let [nb, nc, h, wd] = dims4(big);
    let [_, na, oh, ow] = dims4(small);
    let k = g.kernel;
    let x = big.data();
    let y = small.data();
    let mut out = vec![0.0; na * nc * k * k];
    for b in 0..nb {
        for a in 0..na {
            let gs = &y[(b * na + a) * oh * ow..(b * na + a + 1) * oh * ow];
            for c in 0..nc {
                let src = &x[(b * nc + c) * h * wd..(b * nc + c + 1) * h * wd];
                let dst = &mut out[(a * nc + c) * k * k..(a * nc + c + 1) * k * k];
                for u in 0..k {
                    for v in 0..k {
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let r = (i * g.stride + u) as isize - g.pad as isize;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            let row = &src[r as usize * wd..(r as usize + 1) * wd];
                            for j in 0..ow {
                                let col = (j * g.stride + v) as isize - g.pad as isize;
                                if col >= 0 && col < wd as isize {
                                    acc += gs[i * ow + j] * row[col as usize];
                                }
                            }
                        }
                        dst[u * k + v] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![na, nc, k, k], out)
}

fn check_square_kernel(w: &Tensor, g: ConvGeom) {
    let s = w.shape();
    assert!(
        s.len() == 4 && s[2] == g.kernel && s[3] == g.kernel,
        "weight {s:?} does not match kernel size {}",
        g.kernel
    );
}

impl Var {
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]` -> `[B, Cout, H', W']`.
    /// No bias; add one by broadcasting.
    pub fn conv2d(&self, w: &Var, g: ConvGeom) -> Var {
        check_square_kernel(w.value(), g);
        let x = self.value_rc();
        let wv = w.value_rc();
        let [_, _, h, wd] = dims4(&x);
        let oh = g.conv_out(h).unwrap_or_else(|| panic!("height {h} does not tile {g:?}"));
        let ow = g.conv_out(wd).unwrap_or_else(|| panic!("width {wd} does not tile {g:?}"));
        let value = gather(&x, &wv, g, (oh, ow));
        self.tape()
            .push("conv2d", &[self, w], value, move |gy| vec![scatter(gy, &wv, g, (h, wd)), weight_grad(&x, gy, g)])
    }

    /// `x: [B, Cin, H, W]`, `w: [Cin, Cout, k, k]` -> `[B, Cout, H', W']`,
    /// the adjoint of [`Var::conv2d`] with the same geometry.
    pub fn conv_transpose2d(&self, w: &Var, g: ConvGeom) -> Var {
        check_square_kernel(w.value(), g);
        let x = self.value_rc();
        let wv = w.value_rc();
        let [_, _, h, wd] = dims4(&x);
        let (oh, ow) = (g.transpose_out(h), g.transpose_out(wd));
        let value = scatter(&x, &wv, g, (oh, ow));
        self.tape().push("conv_transpose2d", &[self, w], value, move |gy| {
            vec![gather(gy, &wv, g, (h, wd)), weight_grad(gy, &x, g)]
        })
    }
}
