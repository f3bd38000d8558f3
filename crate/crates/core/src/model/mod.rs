//! Two-level transform-coding model.
//!
//! `x -> g_a -> y`, `y (or y~) -> h_a -> z`, `z~ -> h_s -> scale of y`,
//! `y~ -> g_s -> x^`, plus a learned factorized prior on `z`.

mod checkpoint;
mod grid;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{read_container, write_container, Container};
pub(crate) use grid::{build_grid, DetachPath, GridOptions, NoiseFamily};
pub use grid::{build_sample_grid, GridMode, Pairing, SampleGrid, Slot};

use crate::densities::{cumulative_shapes, ConditionalGaussianPrior, FactorizedCumulative, UniformPosterior};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, SeededRng, Tape, Tensor, Var};

/// The five disjoint parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    YInfer,
    YGen,
    ZInfer,
    ZGen,
    ZPrior,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::YInfer, Group::YGen, Group::ZInfer, Group::ZGen, Group::ZPrior];

    pub fn name(self) -> &'static str {
        match self {
            Group::YInfer => "y_infer",
            Group::YGen => "y_gen",
            Group::ZInfer => "z_infer",
            Group::ZGen => "z_gen",
            Group::ZPrior => "z_prior",
        }
    }

    /// Inference groups feed the posteriors; the rest define the joint.
    pub fn is_inference(self) -> bool {
        matches!(self, Group::YInfer | Group::ZInfer)
    }

    fn prefix(self) -> &'static str {
        match self {
            Group::YInfer => "g_a.",
            Group::YGen => "g_s.",
            Group::ZInfer => "h_a.",
            Group::ZGen => "h_s.",
            Group::ZPrior => "prior.",
        }
    }

    /// Group owning a parameter name, from its transform prefix.
    pub fn of(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// Two stride-2, kernel-4 stages per transform with tanh between.
    Conv,
    /// One 1x1 affine map per transform, no nonlinearity.
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ArchKind,
    pub channels: usize,
    pub latent_y: usize,
    pub latent_z: usize,
    pub hidden: usize,
    pub prior_stages: usize,
    pub prior_width: usize,
    /// Multiplier on the fan-in scaled init of the analysis transform.
    pub analysis_gain: f64,
}

impl ArchConfig {
    pub fn toy() -> Self {
        Self {
            kind: ArchKind::Conv,
            channels: 3,
            latent_y: 32,
            latent_z: 16,
            hidden: 32,
            prior_stages: 3,
            prior_width: 8,
            analysis_gain: 4.0,
        }
    }

    /// One pixel, one `y` and one `z` dimension, logistic `z` prior.
    pub fn micro() -> Self {
        Self {
            kind: ArchKind::Affine,
            channels: 1,
            latent_y: 1,
            latent_z: 1,
            hidden: 1,
            prior_stages: 1,
            prior_width: 1,
            analysis_gain: 1.0,
        }
    }

    /// Per-pixel affine transforms with as many latent channels as image
    /// channels.
    pub fn affine(channels: usize) -> Self {
        Self {
            kind: ArchKind::Affine,
            channels,
            latent_y: channels,
            latent_z: channels,
            hidden: channels,
            prior_stages: 3,
            prior_width: 3,
            analysis_gain: 1.0,
        }
    }

    /// Spatial downsampling from `x` to `y` and from `y` to `z`.
    pub fn stride(&self) -> usize {
        match self.kind {
            ArchKind::Conv => 4,
            ArchKind::Affine => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.channels > 0
            && self.latent_y > 0
            && self.latent_z > 0
            && self.hidden > 0
            && self.prior_stages > 0
            && self.prior_width > 0
            && self.analysis_gain > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid architecture {self:?}")))
        }
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let (c, cy, cz, n) = (self.channels, self.latent_y, self.latent_z, self.hidden);
        match self.kind {
            ArchKind::Conv => {
                let g = ConvGeom::new(4, 2, 1);
                vec![
                    LayerSpec::conv("g_a.0", c, n, g, true),
                    LayerSpec::conv("g_a.1", n, cy, g, false),
                    LayerSpec::conv("h_a.0", cy, cz, g, true),
                    LayerSpec::conv("h_a.1", cz, cz, g, false),
                    LayerSpec::convt("h_s.0", cz, cz, g, true),
                    LayerSpec::convt("h_s.1", cz, cy, g, false),
                    LayerSpec::convt("g_s.0", cy, n, g, true),
                    LayerSpec::convt("g_s.1", n, c, g, false),
                ]
            }
            ArchKind::Affine => {
                let g = ConvGeom::new(1, 1, 0);
                vec![
                    LayerSpec::conv("g_a.0", c, cy, g, false),
                    LayerSpec::conv("h_a.0", cy, cz, g, false),
                    LayerSpec::convt("h_s.0", cz, cy, g, false),
                    LayerSpec::convt("g_s.0", cy, c, g, false),
                ]
            }
        }
    }
}

#[derive(Clone, Debug)]
struct LayerSpec {
    name: &'static str,
    transpose: bool,
    cin: usize,
    cout: usize,
    geom: ConvGeom,
    tanh_after: bool,
}

impl LayerSpec {
    fn conv(name: &'static str, cin: usize, cout: usize, geom: ConvGeom, tanh_after: bool) -> Self {
        Self { name, transpose: false, cin, cout, geom, tanh_after }
    }

    fn convt(name: &'static str, cin: usize, cout: usize, geom: ConvGeom, tanh_after: bool) -> Self {
        Self { name, transpose: true, cin, cout, geom, tanh_after }
    }

    fn weight_shape(&self) -> Vec<usize> {
        let k = self.geom.kernel;
        if self.transpose {
            vec![self.cin, self.cout, k, k]
        } else {
            vec![self.cout, self.cin, k, k]
        }
    }

    fn fan_in(&self) -> f64 {
        let k2 = (self.geom.kernel * self.geom.kernel) as f64;
        let s2 = (self.geom.stride * self.geom.stride) as f64;
        if self.transpose {
            self.cin as f64 * k2 / s2
        } else {
            self.cin as f64 * k2
        }
    }
}

/// `softplus` preimage of one: prior scales start near unity.
const UNIT_SCALE_BIAS: f64 = 0.5413248546129181;

/// Parameters, architecture and the `direct_y` switch.
#[derive(Clone, Debug, PartialEq)]
pub struct HierModel {
    arch: ArchConfig,
    direct_y: bool,
    params: BTreeMap<String, Tensor>,
}

/// Parameter names of the micro model, in the order used by
/// [`HierModel::micro`].
pub const MICRO_PARAM_NAMES: [&str; 10] = [
    "g_a.0.weight",
    "g_a.0.bias",
    "h_a.0.weight",
    "h_a.0.bias",
    "h_s.0.weight",
    "h_s.0.bias",
    "g_s.0.weight",
    "g_s.0.bias",
    "prior.matrix0",
    "prior.bias0",
];

impl HierModel {
    /// Random initialization, deterministic in `seed`.
    pub fn new(arch: ArchConfig, direct_y: bool, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SeededRng::new(seed, 0);
        let mut params = BTreeMap::new();
        for layer in arch.layers() {
            let gain = if layer.name.starts_with("g_a.") { arch.analysis_gain } else { 1.0 };
            let std = gain / layer.fan_in().sqrt();
            params.insert(format!("{}.weight", layer.name), rng.normal(&layer.weight_shape(), 0.0, std));
            let mut bias = Tensor::zeros(&[layer.cout]);
            if layer.name.starts_with("h_s.") && !layer.tanh_after {
                bias = Tensor::full(&[layer.cout], UNIT_SCALE_BIAS);
            }
            params.insert(format!("{}.bias", layer.name), bias);
        }
        // Monotone prior init: softplus(matrix) = s^(1/K) / width, so the
        // composed map starts with slope of roughly `s` = 10.
        let k = arch.prior_stages as f64;
        let scale = 10f64.powf(1.0 / k);
        for (name, shape) in cumulative_shapes(arch.latent_z, arch.prior_stages, arch.prior_width) {
            let t = if name.starts_with("matrix") {
                let dout = shape[1] as f64;
                Tensor::full(&shape, (1.0 / scale / dout).exp_m1().ln())
            } else if name.starts_with("bias") {
                rng.centered_tensor(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(format!("prior.{name}"), t);
        }
        let model = Self { arch, direct_y, params };
        model.check_partition()?;
        Ok(model)
    }

    /// The [`ArchConfig::affine`] model with identity analysis, synthesis
    /// and hyper-analysis maps plus small perturbations.
    pub fn identity_like(channels: usize, direct_y: bool, seed: u64) -> Result<Self> {
        let mut m = Self::new(ArchConfig::affine(channels), direct_y, seed)?;
        let mut rng = SeededRng::new(seed, 1);
        for name in ["g_a.0.weight", "h_a.0.weight", "g_s.0.weight"] {
            let t = m.params.get_mut(name).expect("affine layer");
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let diag = i / channels == i % channels;
                *v = if diag { 1.0 } else { 0.0 } + 0.01 * rng.centered();
            }
        }
        Ok(m)
    }

    /// The micro model with the given values for [`MICRO_PARAM_NAMES`].
    pub fn micro(values: &[f64; 10], direct_y: bool) -> Self {
        let arch = ArchConfig::micro();
        let shapes: [&[usize]; 10] = [
            &[1, 1, 1, 1],
            &[1],
            &[1, 1, 1, 1],
            &[1],
            &[1, 1, 1, 1],
            &[1],
            &[1, 1, 1, 1],
            &[1],
            &[1, 1, 1],
            &[1, 1, 1],
        ];
        let params = MICRO_PARAM_NAMES
            .iter()
            .zip(shapes)
            .zip(values)
            .map(|((n, s), &v)| (n.to_string(), Tensor::full(s, v)))
            .collect();
        Self { arch, direct_y, params }
    }

    pub fn from_parts(arch: ArchConfig, direct_y: bool, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let reference = Self::new(arch.clone(), direct_y, 0)?;
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "parameter {name}: expected {:?}, got {:?}",
                        t.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        if let Some(extra) = params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::Contract(format!("unknown parameter {extra}")));
        }
        Ok(Self { arch, direct_y, params })
    }

    fn check_partition(&self) -> Result<()> {
        match self.params.keys().find(|n| Group::of(n).is_none()) {
            Some(n) => Err(Error::contract(format!("parameter {n} belongs to no group"))),
            None => Ok(()),
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn direct_y(&self) -> bool {
        self.direct_y
    }

    pub fn with_direct_y(mut self, direct_y: bool) -> Self {
        self.direct_y = direct_y;
        self
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn group_names(&self, group: Group) -> Vec<&str> {
        self.params.keys().filter(|n| Group::of(n) == Some(group)).map(String::as_str).collect()
    }

    /// First 16 hex digits of a SHA-256 over architecture and parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        h.update([self.direct_y as u8]);
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Registers every parameter on `tape` under its own name.
    pub fn bind(&self, tape: &Tape) -> BoundModel<'_> {
        let vars = self.params.iter().map(|(n, t)| (n.clone(), tape.param(n, t.clone()))).collect();
        BoundModel { model: self, tape: tape.clone(), vars }
    }

    /// Like [`HierModel::bind`] but only `trainable` parameters are
    /// trainable leaves; the rest enter as constants.
    pub fn bind_partial(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> BoundModel<'_> {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable(n) { tape.param(n, t.clone()) } else { tape.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        BoundModel { model: self, tape: tape.clone(), vars }
    }

    /// Writes architecture and parameters to `path`.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({ "arch": self.arch, "direct_y": self.direct_y });
        let tensors = self.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        write_container(path, &Container { meta, tensors })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(read_container(path)?)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let fmt = |d: String| Error::Format { what: "checkpoint", detail: d };
        let arch: ArchConfig =
            serde_json::from_value(c.meta.get("arch").cloned().ok_or_else(|| fmt("missing arch".into()))?)?;
        let direct_y =
            c.meta.get("direct_y").and_then(|v| v.as_bool()).ok_or_else(|| fmt("missing direct_y".into()))?;
        let params = c.tensors.into_iter().filter(|(n, _)| Group::of(n).is_some()).collect();
        Self::from_parts(arch, direct_y, params)
    }
}

/// Where the `z` inference network takes its input from.
#[derive(Clone, Copy, Debug)]
pub enum ZSource<'a> {
    /// The posterior mean `y`, one per image.
    Mean(&'a Var),
    /// Noisy samples `y~`, any number per image.
    Samples(&'a Var),
}

/// A model whose parameters live on a tape.
pub struct BoundModel<'m> {
    model: &'m HierModel,
    tape: Tape,
    vars: BTreeMap<String, Var>,
}

impl<'m> BoundModel<'m> {
    pub fn model(&self) -> &'m HierModel {
        self.model
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn var(&self, name: &str) -> &Var {
        &self.vars[name]
    }

    /// The same parameters as constants on the same tape.
    pub(crate) fn detached(&self) -> BoundModel<'m> {
        BoundModel {
            model: self.model,
            tape: self.tape.clone(),
            vars: self.vars.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    fn run(&self, prefix: &str, input: &Var) -> Var {
        let mut h = input.clone();
        for layer in self.model.arch.layers().iter().filter(|l| l.name.starts_with(prefix)) {
            let w = self.var(&format!("{}.weight", layer.name));
            let b = self.var(&format!("{}.bias", layer.name)).reshape(&[1, layer.cout, 1, 1]);
            h = if layer.transpose { h.conv_transpose2d(w, layer.geom) } else { h.conv2d(w, layer.geom) };
            h = h.add(&b);
            if layer.tanh_after {
                h = h.tanh();
            }
        }
        h
    }

    fn check_input(&self, x: &Var, channels: usize, what: &str) -> Result<()> {
        let s = x.shape();
        let stride = self.model.arch.stride();
        let tiles = |n: usize| n > 0 && n.is_multiple_of((stride * stride).max(1));
        let spatial_ok = match what {
            "x" => s.len() == 4 && tiles(s[2]) && tiles(s[3]),
            _ => s.len() == 4 && s[2].is_multiple_of(stride) && s[3].is_multiple_of(stride) && s[2] > 0,
        };
        if s.len() != 4 || s[1] != channels || !spatial_ok {
            return Err(Error::Shape(format!(
                "{what}: got {s:?}, expected [B, {channels}, H, W] with tiling spatial size"
            )));
        }
        Ok(())
    }

    /// Posterior over `y` given `x: [B, C, H, W]`.
    pub fn infer_y(&self, x: &Var) -> Result<UniformPosterior> {
        self.check_input(x, self.model.arch.channels, "x")?;
        Ok(UniformPosterior::new(self.run("g_a.", x)))
    }

    /// Posterior over `z`. Under `direct_y` only the mean is accepted;
    /// otherwise only noisy samples are.
    pub fn infer_z(&self, source: ZSource<'_>) -> Result<UniformPosterior> {
        let input = match (self.model.direct_y, source) {
            (true, ZSource::Mean(y)) | (false, ZSource::Samples(y)) => y,
            (true, ZSource::Samples(_)) => {
                return Err(Error::contract("direct_y model: z must be inferred from the mean y, not from samples"))
            }
            (false, ZSource::Mean(_)) => {
                return Err(Error::contract("z is inferred from noisy samples when direct_y is off"))
            }
        };
        self.check_input(input, self.model.arch.latent_y, "y")?;
        Ok(UniformPosterior::new(self.run("h_a.", input)))
    }

    /// `p(y~ | z~)` for `z~: [N, Cz, h, w]`; the scale has shape
    /// `[N, Cy, h * s, w * s]`.
    pub fn y_prior(&self, z_tilde: &Var) -> ConditionalGaussianPrior {
        ConditionalGaussianPrior::from_raw(&self.run("h_s.", z_tilde))
    }

    pub fn z_prior(&self) -> FactorizedCumulative {
        let a = &self.model.arch;
        let vars: Vec<Var> = cumulative_shapes(a.latent_z, a.prior_stages, a.prior_width)
            .into_iter()
            .map(|(n, _)| self.var(&format!("prior.{n}")).clone())
            .collect();
        FactorizedCumulative::from_vars(&vars, a.prior_stages).expect("prior layout fixed by construction")
    }

    /// Reconstructions for `y: [N, Cy, h, w]`.
    pub fn synthesize(&self, y: &Var) -> Var {
        self.run("g_s.", y)
    }
}
