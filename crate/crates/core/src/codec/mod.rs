//! Quantization, entropy coding of the two latent levels, and
//! rate-distortion measurement of the resulting streams.

mod range;

pub use range::{
    decode_symbol, encode_symbol, escape_bits, ideal_bits, range_decode, range_encode, CodingTable, RangeDecoder,
    RangeEncoder, ESCAPE_LIMIT,
};

use serde::{Deserialize, Serialize};

use crate::densities::{discretize, GaussianCdf, IntegerPmf, ScalarCdf};
use crate::error::{Error, Result};
use crate::model::{HierModel, ZSource};
use crate::objectives::rd_cost;
use crate::tensor::{SeededRng, Tape, Tensor};

/// Coder precision in bits.
pub const PRECISION_BITS: u32 = 16;
/// Central mass kept in each PMF's explicit support.
pub const SUPPORT_QUANTILE: f64 = 1.0 - 1e-6;

const MAGIC: &[u8; 6] = b"MSNICS";
pub const STREAM_VERSION: u8 = 1;

/// Nearest integer, ties to even.
pub fn quantize_round(y: &Tensor) -> Tensor {
    y.map(f64::round_ties_even)
}

/// `round(y + u) - u` with a fresh dither `u ~ U(-1/2, 1/2)` per element.
/// Returns the quantized tensor and the dither.
pub fn universal_quantize(y: &Tensor, rng: &mut SeededRng) -> (Tensor, Tensor) {
    let u = rng.centered_tensor(y.shape());
    let q = y.zip_map(&u, |v, d| (v + d).round_ties_even() - d);
    (q, u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Round,
    Uq,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Round => "round",
            QuantMode::Uq => "uq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "round" => Ok(QuantMode::Round),
            "uq" => Ok(QuantMode::Uq),
            _ => Err(Error::Config(format!("unknown quantization mode {s:?} (round, uq)"))),
        }
    }
}

/// Dither streams for each latent level, derived from the header seed.
fn dither(seed: u64, shape: &[usize], level: u64) -> Tensor {
    SeededRng::new(seed, 0xD1_7E00 + level).centered_tensor(shape)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamHeader {
    pub mode: QuantMode,
    pub dither_seed: u64,
    pub lambda: f64,
    pub model_hash: String,
    /// `[C, H, W]` of the source image.
    pub image_shape: [u32; 3],
    pub y_shape: [u32; 3],
    pub z_shape: [u32; 3],
}

/// Binary layout, little-endian:
///
/// | field | bytes |
/// |---|---|
/// | magic `MSNICS` | 6 |
/// | version | 1 |
/// | mode (0 round, 1 uq) | 1 |
/// | dither seed | 8 |
/// | lambda (f64) | 8 |
/// | model hash length, hash bytes | 1 + n |
/// | image, y, z shapes | 3 x 3 x 4 |
/// | z payload length, y payload length | 4 + 4 |
/// | z payload, y payload | |
#[derive(Clone, Debug, PartialEq)]
pub struct CodedStream {
    pub header: StreamHeader,
    pub z_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
}

impl CodedStream {
    pub fn payload_bytes(&self) -> usize {
        self.z_payload.len() + self.y_payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(96 + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.push(STREAM_VERSION);
        out.push(match h.mode {
            QuantMode::Round => 0,
            QuantMode::Uq => 1,
        });
        out.extend_from_slice(&h.dither_seed.to_le_bytes());
        out.extend_from_slice(&h.lambda.to_le_bytes());
        out.push(h.model_hash.len() as u8);
        out.extend_from_slice(h.model_hash.as_bytes());
        for s in [h.image_shape, h.y_shape, h.z_shape] {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.z_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.y_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_payload);
        out.extend_from_slice(&self.y_payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::Format { what: "coded stream", detail: d.to_string() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u8().ok_or_else(|| bad("truncated"))?;
        if version != STREAM_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mode = match r.u8() {
            Some(0) => QuantMode::Round,
            Some(1) => QuantMode::Uq,
            _ => return Err(bad("bad mode byte")),
        };
        let dither_seed = r.u64().ok_or_else(|| bad("truncated"))?;
        let lambda = f64::from_bits(r.u64().ok_or_else(|| bad("truncated"))?);
        let n = r.u8().ok_or_else(|| bad("truncated"))? as usize;
        let model_hash = String::from_utf8(r.take(n).ok_or_else(|| bad("truncated"))?.to_vec())
            .map_err(|_| bad("hash not utf-8"))?;
        let mut shapes = [[0u32; 3]; 3];
        for s in shapes.iter_mut() {
            for v in s.iter_mut() {
                *v = r.u32().ok_or_else(|| bad("truncated shape block"))?;
            }
        }
        let zl = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let yl = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let z_payload = r.take(zl).ok_or_else(|| bad("truncated z payload"))?.to_vec();
        let y_payload = r.take(yl).ok_or_else(|| bad("truncated y payload"))?.to_vec();
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            header: StreamHeader {
                mode,
                dither_seed,
                lambda,
                model_hash,
                image_shape: shapes[0],
                y_shape: shapes[1],
                z_shape: shapes[2],
            },
            z_payload,
            y_payload,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Integer symbols of both latent levels.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub z: Vec<i64>,
    pub y: Vec<i64>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub stream: CodedStream,
    pub latents: Latents,
    /// Ideal code length under the quantized tables, escapes included.
    pub ideal_bits: f64,
    /// `-log2` of the continuous likelihood of the quantized latents.
    pub continuous_bits: f64,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub latents: Latents,
    /// Reconstruction `[C, H, W]` clamped to `[0, 1]` and rounded to 8 bits.
    pub image: Tensor,
}

fn shape3(s: &[usize]) -> [u32; 3] {
    [s[1] as u32, s[2] as u32, s[3] as u32]
}

fn dims(s: [u32; 3]) -> [usize; 4] {
    [1, s[0] as usize, s[1] as usize, s[2] as usize]
}

fn z_pmfs(model: &HierModel, z_shape: [usize; 4], offsets: Option<&Tensor>) -> Result<Vec<IntegerPmf>> {
    let tape = Tape::no_grad();
    let prior = model.bind(&tape).z_prior();
    let per_channel = z_shape[2] * z_shape[3];
    let mut out = Vec::with_capacity(z_shape[1] * per_channel);
    for c in 0..z_shape[1] {
        let cdf = prior.channel_cdf(c);
        match offsets {
            None => {
                let pmf = discretize(&cdf, 0.0, SUPPORT_QUANTILE, PRECISION_BITS)?;
                out.extend(std::iter::repeat_n(pmf, per_channel));
            }
            Some(u) => {
                for i in 0..per_channel {
                    let off = -u.data()[c * per_channel + i];
                    out.push(discretize(&cdf, off, SUPPORT_QUANTILE, PRECISION_BITS)?);
                }
            }
        }
    }
    Ok(out)
}

/// PMFs for `y` built from the decoded `z` values only.
fn y_scales(model: &HierModel, z_hat: &Tensor) -> Tensor {
    let tape = Tape::no_grad();
    let b = model.bind(&tape);
    b.y_prior(&tape.constant(z_hat.clone())).scale().value().clone()
}

fn y_pmfs(scales: &Tensor, offsets: Option<&Tensor>) -> Result<Vec<IntegerPmf>> {
    scales
        .data()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let off = offsets.map_or(0.0, |u| -u.data()[i]);
            discretize(&GaussianCdf { sigma: s }, off, SUPPORT_QUANTILE, PRECISION_BITS)
        })
        .collect()
}

/// Continuous values represented by `symbols` under the stream's mode.
fn dequantize(symbols: &[i64], shape: &[usize], u: Option<&Tensor>) -> Result<Tensor> {
    let data = match u {
        None => symbols.iter().map(|&n| n as f64).collect(),
        Some(u) => symbols.iter().zip(u.data()).map(|(&n, d)| n as f64 - d).collect(),
    };
    Tensor::new(shape.to_vec(), data)
}

fn check_image(model: &HierModel, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != model.arch().channels {
        return Err(Error::Shape(format!("image must be [{}, H, W], got {s:?}", model.arch().channels)));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("image values must lie in [0, 1]"));
    }
    Ok(())
}

/// `x_hat - x` for every `z` then `y` element of `image` under `mode`,
/// using the same dither as [`encode_image`].
pub fn quantization_error(model: &HierModel, image: &Tensor, mode: QuantMode, seed: u64) -> Result<Vec<f64>> {
    check_image(model, image)?;
    let s = image.shape();
    let tape = Tape::no_grad();
    let b = model.bind(&tape);
    let x = tape.constant(image.reshape(&[1, s[0], s[1], s[2]])?);
    let y = b.infer_y(&x)?.mean().clone();
    let source = if model.direct_y() { ZSource::Mean(&y) } else { ZSource::Samples(&y) };
    let z = b.infer_z(source)?.mean().value().clone();
    let mut out = Vec::with_capacity(z.len() + y.value().len());
    for (level, v) in [(0, &z), (1, y.value())] {
        match mode {
            QuantMode::Round => out.extend(v.data().iter().map(|x| x.round_ties_even() - x)),
            QuantMode::Uq => {
                let u = dither(seed, v.shape(), level);
                out.extend(v.data().iter().zip(u.data()).map(|(x, d)| ((x + d).round_ties_even() - d) - x));
            }
        }
    }
    Ok(out)
}

/// Encodes `z` under the factorized prior, then `y` under Gaussians
/// whose scales come from the decoded `z`.
pub fn encode_image(model: &HierModel, image: &Tensor, lambda: f64, mode: QuantMode, seed: u64) -> Result<Encoded> {
    check_image(model, image)?;
    let s = image.shape();
    let tape = Tape::no_grad();
    let b = model.bind(&tape);
    let x = tape.constant(image.reshape(&[1, s[0], s[1], s[2]])?);
    let y_var = b.infer_y(&x)?.mean().clone();
    let source = if model.direct_y() { ZSource::Mean(&y_var) } else { ZSource::Samples(&y_var) };
    let z = b.infer_z(source)?.mean().value().clone();
    let y = y_var.value().clone();

    let uq = mode == QuantMode::Uq;
    let u_z = uq.then(|| dither(seed, z.shape(), 0));
    let u_y = uq.then(|| dither(seed, y.shape(), 1));
    let symbols = |v: &Tensor, u: Option<&Tensor>| -> Vec<i64> {
        match u {
            None => v.data().iter().map(|x| x.round_ties_even() as i64).collect(),
            Some(u) => v.data().iter().zip(u.data()).map(|(x, d)| (x + d).round_ties_even() as i64).collect(),
        }
    };

    let z_sym = symbols(&z, u_z.as_ref());
    let zp = z_pmfs(model, z.shape().try_into().unwrap(), u_z.as_ref())?;
    let z_refs: Vec<&IntegerPmf> = zp.iter().collect();
    let z_payload = range_encode(&z_sym, &z_refs)?;
    let z_hat = dequantize(&z_sym, z.shape(), u_z.as_ref())?;

    let scales = y_scales(model, &z_hat);
    if scales.shape() != y.shape() {
        return Err(Error::Shape(format!("hyper-synthesis gives {:?} for y {:?}", scales.shape(), y.shape())));
    }
    let y_sym = symbols(&y, u_y.as_ref());
    let yp = y_pmfs(&scales, u_y.as_ref())?;
    let y_refs: Vec<&IntegerPmf> = yp.iter().collect();
    let y_payload = range_encode(&y_sym, &y_refs)?;

    let ideal_bits = z_sym.iter().zip(&zp).chain(y_sym.iter().zip(&yp)).map(|(&s, p)| ideal_bits(p, s)).sum();

    let prior = b.z_prior();
    let per_channel = z.shape()[2] * z.shape()[3];
    let z_hat_data = z_hat.data();
    let mut continuous_bits = 0.0;
    for (i, &v) in z_hat_data.iter().enumerate() {
        continuous_bits -= prior.channel_cdf(i / per_channel).ln_interval(v - 0.5, v + 0.5);
    }
    let y_hat = dequantize(&y_sym, y.shape(), u_y.as_ref())?;
    for (&v, &sg) in y_hat.data().iter().zip(scales.data()) {
        continuous_bits -= GaussianCdf { sigma: sg }.ln_interval(v - 0.5, v + 0.5);
    }
    continuous_bits /= std::f64::consts::LN_2;

    let stream = CodedStream {
        header: StreamHeader {
            mode,
            dither_seed: seed,
            lambda,
            model_hash: model.fingerprint(),
            image_shape: [s[0] as u32, s[1] as u32, s[2] as u32],
            y_shape: shape3(y.shape()),
            z_shape: shape3(z.shape()),
        },
        z_payload,
        y_payload,
    };
    Ok(Encoded { stream, latents: Latents { z: z_sym, y: y_sym }, ideal_bits, continuous_bits })
}

/// Reconstructs from the stream and the model alone.
pub fn decode_stream(model: &HierModel, stream: &CodedStream) -> Result<Decoded> {
    let h = &stream.header;
    if h.model_hash != model.fingerprint() {
        return Err(Error::Coder(format!(
            "stream was coded with model {} but decoder has {}",
            h.model_hash,
            model.fingerprint()
        )));
    }
    let zs = dims(h.z_shape);
    let ys = dims(h.y_shape);
    let uq = h.mode == QuantMode::Uq;
    let u_z = uq.then(|| dither(h.dither_seed, &zs, 0));
    let u_y = uq.then(|| dither(h.dither_seed, &ys, 1));

    let zp = z_pmfs(model, zs, u_z.as_ref())?;
    let z_sym = range_decode(&stream.z_payload, &zp.iter().collect::<Vec<_>>())?;
    let z_hat = dequantize(&z_sym, &zs, u_z.as_ref())?;

    let scales = y_scales(model, &z_hat);
    if scales.shape() != ys {
        return Err(Error::Coder("header y shape disagrees with hyper-synthesis".into()));
    }
    let yp = y_pmfs(&scales, u_y.as_ref())?;
    let y_sym = range_decode(&stream.y_payload, &yp.iter().collect::<Vec<_>>())?;
    let y_hat = dequantize(&y_sym, &ys, u_y.as_ref())?;

    let tape = Tape::no_grad();
    let x_hat = model.bind(&tape).synthesize(&tape.constant(y_hat)).value().clone();
    let [c, hh, ww] = h.image_shape.map(|v| v as usize);
    if x_hat.shape() != [1, c, hh, ww] {
        return Err(Error::Coder(format!("reconstruction shape {:?} disagrees with header", x_hat.shape())));
    }
    let image = x_hat.reshape(&[c, hh, ww])?.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    Ok(Decoded { latents: Latents { z: z_sym, y: y_sym }, image })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    /// Bits per pixel of the ideal code length under the coder's tables.
    pub bpp_estimated: f64,
    /// Bits per pixel of the two range-coded payloads.
    pub bpp_actual: f64,
    /// Bits per pixel from the continuous likelihood of the latents.
    pub bpp_continuous: f64,
    pub mse_255: f64,
    pub psnr_db: f64,
    /// `bpp_actual + lambda * mse_255`.
    pub rd_cost: f64,
    pub lambda: f64,
}

pub fn psnr_db(mse_255: f64) -> f64 {
    10.0 * (255.0f64 * 255.0 / mse_255).log10()
}

/// Codes `image: [C, H, W]`, decodes it again and measures the result.
/// Fails if the decoded latents differ from the encoded ones.
pub fn evaluate_rd(model: &HierModel, image: &Tensor, lambda: f64, mode: QuantMode, seed: u64) -> Result<RDPoint> {
    let enc = encode_image(model, image, lambda, mode, seed)?;
    let wire = enc.stream.to_bytes();
    let dec = decode_stream(model, &CodedStream::from_bytes(&wire)?)?;
    if dec.latents != enc.latents {
        return Err(Error::Coder("decoded latents differ from encoded ones".into()));
    }
    let s = image.shape();
    let pixels = (s[1] * s[2]) as f64;
    let mse_255 = image.data().iter().zip(dec.image.data()).map(|(a, b)| (255.0 * (a - b)).powi(2)).sum::<f64>()
        / image.len() as f64;
    let bpp_actual = enc.stream.payload_bytes() as f64 * 8.0 / pixels;
    Ok(RDPoint {
        bpp_estimated: enc.ideal_bits / pixels,
        bpp_actual,
        bpp_continuous: enc.continuous_bits / pixels,
        mse_255,
        psnr_db: psnr_db(mse_255),
        rd_cost: rd_cost(bpp_actual, mse_255, lambda),
        lambda,
    })
}

/// Per-image points and their means; PSNR is averaged per image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RdSummary {
    pub mode: QuantMode,
    pub mean: RDPoint,
    pub points: Vec<RDPoint>,
}

pub fn evaluate_rd_set(
    model: &HierModel,
    images: &[Tensor],
    lambda: f64,
    mode: QuantMode,
    seed: u64,
) -> Result<RdSummary> {
    use rayon::prelude::*;
    if images.is_empty() {
        return Err(Error::contract("no images to evaluate"));
    }
    let points = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| evaluate_rd(model, img, lambda, mode, SeededRng::new(seed, i as u64).next_u64()))
        .collect::<Result<Vec<_>>>()?;
    let n = points.len() as f64;
    let avg = |f: fn(&RDPoint) -> f64| points.iter().map(f).sum::<f64>() / n;
    let mean = RDPoint {
        bpp_estimated: avg(|p| p.bpp_estimated),
        bpp_actual: avg(|p| p.bpp_actual),
        bpp_continuous: avg(|p| p.bpp_continuous),
        mse_255: avg(|p| p.mse_255),
        psnr_db: avg(|p| p.psnr_db),
        rd_cost: avg(|p| p.rd_cost),
        lambda,
    };
    Ok(RdSummary { mode, mean, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{synthesize, SyntheticKind};
    use crate::model::ArchConfig;

    #[test]
    fn rounding_rule() {
        let t = Tensor::vector(&[0.4, 0.6, -1.5, 2.5, -0.5]);
        assert_eq!(quantize_round(&t).data(), &[0.0, 1.0, -2.0, 2.0, -0.0]);
        assert_eq!(quantize_round(&quantize_round(&t)), quantize_round(&t));
    }

    #[test]
    fn zero_dither_is_rounding() {
        let t = Tensor::vector(&[0.4, 0.6, -1.5, 3.2]);
        let q = t.zip_map(&Tensor::zeros(&[4]), |v, d| (v + d).round_ties_even() - d);
        assert_eq!(q, quantize_round(&t));
        let (uq, u) = universal_quantize(&t, &mut SeededRng::new(1, 0));
        for ((a, b), d) in uq.data().iter().zip(t.data()).zip(u.data()) {
            assert!((a - b).abs() <= 0.5 && d.abs() <= 0.5);
        }
    }

    #[test]
    fn psnr_definition() {
        assert_eq!(psnr_db(65025.0), 0.0);
        assert!((psnr_db(650.25) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn stream_roundtrip_both_modes() {
        let model = HierModel::new(ArchConfig::toy(), true, 5).unwrap();
        let data = synthesize(SyntheticKind::Mixed, 2, 16, 3, 9, 4.0, 4).unwrap();
        for mode in [QuantMode::Round, QuantMode::Uq] {
            for img in &data.images {
                let enc = encode_image(&model, img, 0.01, mode, 77).unwrap();
                let bytes = enc.stream.to_bytes();
                let back = CodedStream::from_bytes(&bytes).unwrap();
                assert_eq!(back, enc.stream);
                assert_eq!(decode_stream(&model, &back).unwrap().latents, enc.latents);
                let p = evaluate_rd(&model, img, 0.01, mode, 77).unwrap();
                assert!(p.bpp_actual + 1e-9 >= p.bpp_estimated, "{p:?}");
            }
        }
    }

    #[test]
    fn quantization_errors_stay_in_the_unit_cell() {
        let model = HierModel::new(ArchConfig::toy(), true, 5).unwrap();
        let img = Tensor::full(&[3, 16, 16], 0.3);
        let r = quantization_error(&model, &img, QuantMode::Round, 1).unwrap();
        let u = quantization_error(&model, &img, QuantMode::Uq, 1).unwrap();
        assert_eq!(r.len(), u.len());
        assert!(r.iter().chain(&u).all(|e| e.abs() <= 0.5 + 1e-12));
        assert_ne!(r, u);
    }

    #[test]
    fn wrong_model_is_rejected() {
        let a = HierModel::new(ArchConfig::toy(), true, 5).unwrap();
        let b = HierModel::new(ArchConfig::toy(), true, 6).unwrap();
        let img = Tensor::full(&[3, 16, 16], 0.5);
        let enc = encode_image(&a, &img, 0.01, QuantMode::Round, 1).unwrap();
        assert!(matches!(decode_stream(&b, &enc.stream), Err(Error::Coder(_))));
        let mut bytes = enc.stream.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(CodedStream::from_bytes(&bytes).is_err());
    }
}
