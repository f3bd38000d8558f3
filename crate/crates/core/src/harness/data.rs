//! Synthetic image sets and PNG/PPM ingestion. Images are `[C, H, W]`
//! tensors with 8-bit values scaled to `[0, 1]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Smoothed white noise; `corr_len` sets the blur radius in pixels.
    GaussianField,
    /// Linear ramps at a random angle.
    GradientRamp,
    /// Two-colour checkerboard repeating every `period` pixels.
    Checkerboard,
    /// The other three kinds in rotation.
    Mixed,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_field" => Ok(Self::GaussianField),
            "gradient_ramp" => Ok(Self::GradientRamp),
            "checkerboard" => Ok(Self::Checkerboard),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::Config(format!("unknown synthetic kind {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianField => "gaussian_field",
            Self::GradientRamp => "gradient_ramp",
            Self::Checkerboard => "checkerboard",
            Self::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    Synthetic {
        kind: SyntheticKind,
        count: usize,
        size: usize,
        seed: u64,
        /// Correlation length of `gaussian_field`, in pixels.
        corr_len: f64,
        /// Checkerboard period in pixels.
        period: usize,
    },
    ImageDir {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub source: DataSource,
    /// Side of the square crop taken from ingested images.
    pub patch_size: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    /// Kind per image for synthetic sets, file name for ingested ones.
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl DatasetRef {
    pub fn materialize(&self) -> Result<Dataset> {
        match &self.source {
            DataSource::Synthetic { kind, count, size, seed, corr_len, period } => {
                synthesize(*kind, *count, *size, self.channels, *seed, *corr_len, *period)
            }
            DataSource::ImageDir { path } => load_dir(path, self.patch_size, self.channels),
        }
    }
}

fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// `count` images of side `size`, a pure function of the arguments.
pub fn synthesize(
    kind: SyntheticKind,
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
    corr_len: f64,
    period: usize,
) -> Result<Dataset> {
    if ![16, 32, 64].contains(&size) {
        return Err(Error::Config(format!("synthetic size must be 16, 32 or 64, got {size}")));
    }
    if channels == 0 || !(corr_len > 0.0) || period < 2 {
        return Err(Error::Config("channels, corr_len and period must be positive (period >= 2)".into()));
    }
    let rotation = [SyntheticKind::GaussianField, SyntheticKind::GradientRamp, SyntheticKind::Checkerboard];
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let k = if kind == SyntheticKind::Mixed { rotation[i % 3] } else { kind };
        let mut rng = SeededRng::new(seed, i as u64);
        let img = match k {
            SyntheticKind::GaussianField => gaussian_field(&mut rng, size, channels, corr_len),
            SyntheticKind::GradientRamp => gradient_ramp(&mut rng, size, channels),
            _ => checkerboard(&mut rng, size, channels, period),
        };
        images.push(img.map(quantize8));
        labels.push(k.name().to_string());
    }
    Ok(Dataset { images, labels })
}

/// Periodic separable Gaussian blur of white noise, channels mixed from
/// one shared and one private field, rescaled to mean 1/2, std 0.15.
fn gaussian_field(rng: &mut SeededRng, n: usize, channels: usize, corr_len: f64) -> Tensor {
    let radius = (3.0 * corr_len).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|d| (-0.5 * (d as f64 / corr_len).powi(2)).exp()).collect();
    let blur = |field: Vec<f64>| -> Vec<f64> {
        let mut tmp = vec![0.0; n * n];
        let mut out = vec![0.0; n * n];
        let wrap = |i: isize| i.rem_euclid(n as isize) as usize;
        for r in 0..n {
            for c in 0..n {
                tmp[r * n + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * field[r * n + wrap(c as isize + t as isize - radius)])
                    .sum();
            }
        }
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] =
                    taps.iter().enumerate().map(|(t, w)| w * tmp[wrap(r as isize + t as isize - radius) * n + c]).sum();
            }
        }
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64).sqrt().max(1e-12);
        out.into_iter().map(|v| (v - mean) / std).collect()
    };
    let noise = |rng: &mut SeededRng| (0..n * n).map(|_| rng.standard_normal()).collect::<Vec<_>>();
    let shared = blur(noise(rng));
    let mut data = Vec::with_capacity(channels * n * n);
    for _ in 0..channels {
        let own = blur(noise(rng));
        data.extend(shared.iter().zip(&own).map(|(s, o)| 0.5 + 0.15 * (0.8 * s + 0.6 * o)));
    }
    Tensor::new(vec![channels, n, n], data).expect("shape")
}

fn gradient_ramp(rng: &mut SeededRng, n: usize, channels: usize) -> Tensor {
    let angle = rng.uniform() * 2.0 * std::f64::consts::PI;
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut data = Vec::with_capacity(channels * n * n);
    for _ in 0..channels {
        let (lo, hi) = (0.1 + 0.3 * rng.uniform(), 0.6 + 0.3 * rng.uniform());
        for r in 0..n {
            for c in 0..n {
                let t = ((c as f64 + 0.5) / n as f64 - 0.5) * dx + ((r as f64 + 0.5) / n as f64 - 0.5) * dy;
                data.push(lo + (hi - lo) * (t / std::f64::consts::SQRT_2 + 0.5));
            }
        }
    }
    Tensor::new(vec![channels, n, n], data).expect("shape")
}

/// Squares of side `period / 2` alternating between two random colours,
/// at a random phase.
fn checkerboard(rng: &mut SeededRng, n: usize, channels: usize, period: usize) -> Tensor {
    let side = (period / 2).max(1);
    let (pr, pc) = (rng.below(period as u64) as usize, rng.below(period as u64) as usize);
    let colours: Vec<(f64, f64)> =
        (0..channels).map(|_| (0.15 + 0.3 * rng.uniform(), 0.55 + 0.3 * rng.uniform())).collect();
    let mut data = Vec::with_capacity(channels * n * n);
    for (a, b) in colours {
        for r in 0..n {
            for c in 0..n {
                let odd = ((r + pr) / side + (c + pc) / side) % 2 == 1;
                data.push(if odd { b } else { a });
            }
        }
    }
    Tensor::new(vec![channels, n, n], data).expect("shape")
}

/// Loads every `.png`, `.ppm` and `.pnm` file of `dir` in name order and
/// takes the centred `patch x patch` crop.
pub fn load_dir(dir: &Path, patch: usize, channels: usize) -> Result<Dataset> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config("ingested images must use 1 or 3 channels".into()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG or PPM images in {}", dir.display())));
    }
    let mut images = Vec::with_capacity(files.len());
    let mut labels = Vec::with_capacity(files.len());
    for f in files {
        images.push(load_image(&f, patch, channels)?);
        labels.push(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    Ok(Dataset { images, labels })
}

pub fn load_image(path: &Path, patch: usize, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < patch || h < patch || patch == 0 {
        return Err(Error::Image(format!("{}: {w}x{h} is smaller than the {patch} patch", path.display())));
    }
    let (x0, y0) = ((w - patch) / 2, (h - patch) / 2);
    let mut data = vec![0.0; channels * patch * patch];
    if channels == 3 {
        let rgb = img.to_rgb8();
        for r in 0..patch {
            for c in 0..patch {
                let p = rgb.get_pixel((x0 + c) as u32, (y0 + r) as u32);
                for ch in 0..3 {
                    data[ch * patch * patch + r * patch + c] = p[ch] as f64 / 255.0;
                }
            }
        }
    } else {
        let g = img.to_luma8();
        for r in 0..patch {
            for c in 0..patch {
                data[r * patch + c] = g.get_pixel((x0 + c) as u32, (y0 + r) as u32)[0] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, patch, patch], data)
}

/// Writes a `[C, H, W]` image with values in `[0, 1]` as 8-bit PNG.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::Shape(format!("PNG needs [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = img.data();
    let res = if c == 3 {
        let mut buf = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for ch in 0..3 {
                buf.push(byte(d[ch * h * w + i]));
            }
        }
        image::RgbImage::from_raw(w as u32, h as u32, buf).expect("size").save(path)
    } else {
        image::GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| byte(v)).collect()).expect("size").save(path)
    };
    res.map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_quantized() {
        let a = synthesize(SyntheticKind::Mixed, 7, 16, 3, 4, 2.0, 2).unwrap();
        let b = synthesize(SyntheticKind::Mixed, 7, 16, 3, 4, 2.0, 2).unwrap();
        assert_eq!(a, b);
        for img in &a.images {
            assert!(img
                .data()
                .iter()
                .all(|v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9 && (0.0..=1.0).contains(v)));
        }
        let counts: Vec<usize> = ["gaussian_field", "gradient_ramp", "checkerboard"]
            .iter()
            .map(|k| a.labels.iter().filter(|l| l == k).count())
            .collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn rejects_bad_size() {
        assert!(synthesize(SyntheticKind::Checkerboard, 1, 20, 3, 0, 1.0, 2).is_err());
    }

    #[test]
    fn png_roundtrip() {
        let d = synthesize(SyntheticKind::GaussianField, 2, 16, 3, 1, 2.0, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, img) in d.images.iter().enumerate() {
            write_png(&dir.path().join(format!("{i}.png")), img).unwrap();
        }
        let back = load_dir(dir.path(), 16, 3).unwrap();
        assert_eq!(back.images, d.images);
    }
}
