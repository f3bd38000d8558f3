//! Reparameterized latent samples and their log-weights.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use super::{BoundModel, ZSource};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor, Var};

/// Which bound the samples are wired for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    Elbo,
    Iwae,
    Mix,
    Dms,
}

impl GridMode {
    pub fn name(self) -> &'static str {
        match self {
            GridMode::Elbo => "elbo",
            GridMode::Iwae => "iwae",
            GridMode::Mix => "mix",
            GridMode::Dms => "dms",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(GridMode::Elbo),
            "iwae" => Ok(GridMode::Iwae),
            "mix" => Ok(GridMode::Mix),
            "dms" => Ok(GridMode::Dms),
            _ => Err(Error::Config(format!("unknown objective mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for GridMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How `y` and `z` samples combine into weight slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// `k` pairs, each `z~_i` drawn from `q(z | y~_i)`.
    IwaePaired,
    /// `k` samples of `y~` crossed with `l` samples of `z~`.
    DmsGrid,
    /// `k` samples of `y~` sharing one `z~`.
    Mix,
}

/// The `(y, z)` sample indices feeding one weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Slot {
    pub y: usize,
    pub z: usize,
}

/// Distribution of the posterior noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum NoiseFamily {
    /// Uniform on `[-1/2, 1/2)`; the production posterior.
    Uniform,
    /// Gaussian with standard deviation `std`. Diagnostics only. With
    /// `stop_q_params` the posterior density is evaluated with its
    /// parameters cut from the graph, so gradients reach it only through
    /// the samples.
    Gaussian { std: f64, stop_q_params: bool },
}

/// Which sample path is cut from the gradient graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum DetachPath {
    None,
    /// `z~` enters as a constant.
    Z,
    /// `y~` enters the likelihood terms as a constant; `z` still sees `y`.
    Y,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GridOptions {
    pub family: NoiseFamily,
    pub detach: DetachPath,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { family: NoiseFamily::Uniform, detach: DetachPath::None }
    }
}

/// All samples for one batch, laid out sample-major within each image:
/// row `b * n + i` of a `[B * n, ...]` tensor is sample `i` of image `b`.
pub struct SampleGrid {
    pub mode: GridMode,
    pub pairing: Pairing,
    pub batch: usize,
    /// Number of `y~` per image.
    pub k: usize,
    /// Number of `z~` per image.
    pub l: usize,
    pub lambda: f64,
    /// `H * W` of the input.
    pub pixels: usize,
    pub y_mean: Var,
    pub z_mean: Var,
    pub eps_y: Tensor,
    pub eps_z: Tensor,
    pub y_samples: Var,
    pub z_samples: Var,
    /// Slot `s` of every image combines `y~[slots[s].y]`, `z~[slots[s].z]`.
    pub slots: Vec<Slot>,
    /// `ln p(x | y~_i)`, `[B, k]`.
    pub log_px: Var,
    /// `ln p(y~ | z~)` per slot, `[B, S]`.
    pub log_pyz: Var,
    /// `ln p(z~_j)`, `[B, l]`.
    pub log_pz: Var,
    /// `ln q(y~_i)` and `ln q(z~_j)`; present only for the Gaussian
    /// diagnostic posterior, whose density is not constant.
    pub log_qy: Option<Var>,
    pub log_qz: Option<Var>,
    /// Total log-weight per slot, `[B, S]`.
    pub log_w: Var,
}

impl SampleGrid {
    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Gathers a per-`y` quantity `[B, k]` onto the slots `[B, S]`.
    pub fn y_to_slots(&self, v: &Var) -> Var {
        match self.pairing {
            Pairing::IwaePaired | Pairing::Mix => v.clone(),
            Pairing::DmsGrid => {
                let (b, k, l) = (self.batch, self.k, self.l);
                v.reshape(&[b, k, 1]).expand(&[b, k, l]).reshape(&[b, k * l])
            }
        }
    }

    /// Gathers a per-`z` quantity `[B, l]` onto the slots `[B, S]`.
    pub fn z_to_slots(&self, v: &Var) -> Var {
        let (b, k, l) = (self.batch, self.k, self.l);
        match self.pairing {
            Pairing::IwaePaired => v.clone(),
            Pairing::Mix => v.expand(&[b, k]),
            Pairing::DmsGrid => v.reshape(&[b, 1, l]).expand(&[b, k, l]).reshape(&[b, k * l]),
        }
    }
}

fn pairing_for(mode: GridMode, direct_y: bool) -> Result<Pairing> {
    match (mode, direct_y) {
        (GridMode::Elbo, true) | (GridMode::Mix, true) => Ok(Pairing::Mix),
        (GridMode::Elbo, false) | (GridMode::Iwae, false) => Ok(Pairing::IwaePaired),
        (GridMode::Dms, true) => Ok(Pairing::DmsGrid),
        (GridMode::Iwae, true) => {
            Err(Error::contract("iwae needs z inferred from every noisy sample; disable direct_y"))
        }
        (m, false) => Err(Error::contract(format!("{m} needs direct_y enabled"))),
    }
}

/// Draws `n` noise tensors of `shape` per image from per-image
/// substreams, so the first samples of an image do not depend on `n`.
fn draw_noise(key: u64, stream_offset: u64, batch: usize, n: usize, shape: &[usize], family: NoiseFamily) -> Tensor {
    let per = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(batch * n * per);
    for b in 0..batch {
        let mut rng = SeededRng::new(key, 2 * b as u64 + stream_offset);
        for _ in 0..n * per {
            data.push(match family {
                NoiseFamily::Uniform => rng.centered(),
                NoiseFamily::Gaussian { std, .. } => std * rng.standard_normal(),
            });
        }
    }
    let mut full = vec![batch * n];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("noise shape")
}

/// Builds the sample grid for `mode`. `k` counts `y~` samples; `l` counts
/// `z~` samples and is only read in `dms` mode.
pub fn build_sample_grid(
    model: &BoundModel<'_>,
    x: &Var,
    mode: GridMode,
    k: usize,
    l: usize,
    lambda: f64,
    rng: &mut SeededRng,
) -> Result<SampleGrid> {
    build_grid(model, x, mode, k, l, lambda, rng.next_u64(), GridOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build_grid(
    model: &BoundModel<'_>,
    x: &Var,
    mode: GridMode,
    k: usize,
    l: usize,
    lambda: f64,
    key: u64,
    opts: GridOptions,
) -> Result<SampleGrid> {
    let family = opts.family;
    let direct_y = model.model().direct_y();
    let pairing = pairing_for(mode, direct_y)?;
    let (k, l) = match mode {
        GridMode::Elbo => (1, 1),
        GridMode::Iwae => (k, k),
        GridMode::Mix => (k, 1),
        GridMode::Dms => (k, l),
    };
    if k == 0 || l == 0 {
        return Err(Error::contract("sample counts must be at least one"));
    }
    let tape = model.tape();
    let qy = model.infer_y(x)?;
    let y = qy.mean().clone();
    let ys = y.shape().to_vec();
    let b = ys[0];
    let (xs, ydim) = (x.shape().to_vec(), ys[1..].iter().product::<usize>());
    let pixels = xs[2] * xs[3];

    let eps_y = draw_noise(key, 0, b, k, &ys[1..], family);
    let mut rep = vec![b, k];
    rep.extend_from_slice(&ys[1..]);
    let mut flat = vec![b * k];
    flat.extend_from_slice(&ys[1..]);
    let y_rep = y.reshape(&[&[b, 1][..], &ys[1..]].concat()).expand(&rep).reshape(&flat);
    let y_samples = y_rep.add(&tape.constant(eps_y.clone()));
    let y_used = match opts.detach {
        DetachPath::Y => y_samples.detach(),
        _ => y_samples.clone(),
    };

    let (z_mean, z_rep) = match pairing {
        Pairing::IwaePaired => {
            let z = model.infer_z(ZSource::Samples(&y_samples))?.mean().clone();
            (z.clone(), z)
        }
        Pairing::Mix | Pairing::DmsGrid => {
            let z = model.infer_z(ZSource::Mean(&y))?.mean().clone();
            let zs = z.shape().to_vec();
            let mut rep = vec![b, l];
            rep.extend_from_slice(&zs[1..]);
            let mut flat = vec![b * l];
            flat.extend_from_slice(&zs[1..]);
            let zr = z.reshape(&[&[b, 1][..], &zs[1..]].concat()).expand(&rep).reshape(&flat);
            (z, zr)
        }
    };
    let zshape = z_rep.shape()[1..].to_vec();
    let eps_z = draw_noise(key, 1, b, l, &zshape, family);
    let z_samples = z_rep.add(&tape.constant(eps_z.clone()));
    let z_used = match opts.detach {
        DetachPath::Z => z_samples.detach(),
        _ => z_samples.clone(),
    };

    let zdim: usize = zshape.iter().product();
    let log_pz = model.z_prior().log_likelihood(&z_used).reshape(&[b, l, zdim]).sum_axis(2);

    let scale = model.y_prior(&z_used).scale().clone();
    let prior = crate::densities::ConditionalGaussianPrior::new(match pairing {
        Pairing::IwaePaired => scale.reshape(&[b, k, ydim]),
        Pairing::Mix => scale.reshape(&[b, 1, ydim]),
        Pairing::DmsGrid => scale.reshape(&[b, 1, l, ydim]),
    });
    let ys_slots = match pairing {
        Pairing::DmsGrid => y_used.reshape(&[b, k, 1, ydim]),
        _ => y_used.reshape(&[b, k, ydim]),
    };
    let ll = prior.log_likelihood(&ys_slots);
    let log_pyz = match pairing {
        Pairing::DmsGrid => ll.sum_axis(3).reshape(&[b, k * l]),
        _ => ll.sum_axis(2),
    };

    let x_hat = model.synthesize(&y_used);
    let xdim: usize = xs[1..].iter().product();
    let diff = x_hat.reshape(&[b, k, xdim]).sub(&x.reshape(&[b, 1, xdim]));
    let mse = diff.square().mean_axis(2);
    let log_px = mse.scale(-LN_2 * lambda * 65025.0 * pixels as f64);

    let (log_qy, log_qz) = match family {
        NoiseFamily::Uniform => (None, None),
        NoiseFamily::Gaussian { std: s, stop_q_params } => {
            let gauss = |sample: &Var, mean: &Var, n: usize, dim: usize| {
                let z = sample.sub(mean).scale(1.0 / s);
                let c = -(s.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
                z.square().scale(-0.5).add_scalar(c).reshape(&[b, n, dim]).sum_axis(2)
            };
            let (qy_mean, qz_mean) = if !stop_q_params {
                (y_rep.clone(), z_rep.clone())
            } else if pairing == Pairing::IwaePaired {
                // q(z | y~) keeps its dependence on the sample y~; only the
                // parameters are cut
                let frozen = model.detached();
                (y_rep.detach(), frozen.infer_z(ZSource::Samples(&y_samples))?.mean().clone())
            } else {
                (y_rep.detach(), z_rep.detach())
            };
            (Some(gauss(&y_used, &qy_mean, k, ydim)), Some(gauss(&z_used, &qz_mean, l, zdim)))
        }
    };

    let slots: Vec<Slot> = match pairing {
        Pairing::IwaePaired => (0..k).map(|i| Slot { y: i, z: i }).collect(),
        Pairing::Mix => (0..k).map(|i| Slot { y: i, z: 0 }).collect(),
        Pairing::DmsGrid => (0..k).flat_map(|i| (0..l).map(move |j| Slot { y: i, z: j })).collect(),
    };

    let mut grid = SampleGrid {
        mode,
        pairing,
        batch: b,
        k,
        l,
        lambda,
        pixels,
        y_mean: y,
        z_mean,
        eps_y,
        eps_z,
        y_samples,
        z_samples,
        slots,
        log_pyz: log_pyz.clone(),
        log_px: log_px.clone(),
        log_pz: log_pz.clone(),
        log_qy,
        log_qz,
        log_w: log_pyz.clone(),
    };
    let mut log_w = grid.y_to_slots(&log_px).add(&log_pyz).add(&grid.z_to_slots(&log_pz));
    if let (Some(qy), Some(qz)) = (&grid.log_qy, &grid.log_qz) {
        log_w = log_w.sub(&grid.y_to_slots(qy)).sub(&grid.z_to_slots(qz));
    }
    grid.log_w = log_w;
    Ok(grid)
}
