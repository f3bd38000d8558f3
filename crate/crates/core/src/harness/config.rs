//! Flat key-value experiment configuration. Files are TOML without
//! tables; every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::QuantMode;
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, StageTag};
use crate::harness::data::{DataSource, DatasetRef, SyntheticKind};
use crate::harness::presets;
use crate::model::{ArchConfig, GridMode, HierModel};
use crate::objectives::SurrogateStyle;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    Toy,
    Affine,
    Micro,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Samples,
}

/// Every tunable of every command. Field names are the config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // model
    pub arch: ArchPreset,
    pub direct_y: bool,
    pub model_seed: u64,
    /// Checkpoint to start from instead of a fresh model.
    pub checkpoint: Option<PathBuf>,

    // data
    pub kind: SyntheticKind,
    pub count: usize,
    pub size: usize,
    pub data_seed: u64,
    pub corr_len: f64,
    pub period: usize,
    /// Ingest PNG/PPM files from here instead of synthesizing.
    pub image_dir: Option<PathBuf>,
    pub patch_size: usize,
    pub channels: usize,
    /// Held-out synthetic images for codec and statistics commands.
    pub eval_count: usize,
    pub eval_seed: u64,

    // training
    pub lambda: f64,
    pub mode: GridMode,
    pub k: usize,
    pub l: usize,
    pub surrogate_style: SurrogateStyle,
    pub lr_base: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub warm_fraction: f64,
    pub lr_floor_fraction: f64,
    pub scale_lr_with_samples: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: usize,
    pub snr_replicates: usize,

    // evaluation
    pub quant_mode: QuantMode,
    pub estimator: EstimatorKind,
    pub snr_stage: StageTag,

    // sweeps
    pub sweep: SweepAxis,
    pub lambdas: Vec<f64>,
    pub sample_sizes: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::new(presets::SMOKE_LAMBDA, GridMode::Elbo);
        Self {
            arch: ArchPreset::Toy,
            direct_y: true,
            model_seed: presets::SMOKE_SEED,
            checkpoint: None,
            kind: SyntheticKind::Mixed,
            count: 16,
            size: 16,
            data_seed: 1,
            corr_len: 2.0,
            period: 2,
            image_dir: None,
            patch_size: 16,
            channels: 3,
            eval_count: 20,
            eval_seed: 2,
            lambda: t.lambda,
            mode: t.mode,
            k: t.k,
            l: t.l,
            surrogate_style: t.surrogate_style,
            lr_base: presets::SMOKE_LR,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            epochs: 1,
            max_steps: Some(presets::SMOKE_STEPS),
            warm_fraction: t.warm_fraction,
            lr_floor_fraction: t.lr_floor_fraction,
            scale_lr_with_samples: t.scale_lr_with_samples,
            batch_size: t.batch_size,
            seed: presets::SMOKE_SEED,
            clip_norm: None,
            checkpoint_every: 0,
            snr_replicates: 0,
            quant_mode: QuantMode::Round,
            estimator: EstimatorKind::Pathwise,
            snr_stage: StageTag::Early,
            sweep: SweepAxis::Lambda,
            lambdas: vec![0.0016, 0.0032, 0.0075, 0.015, 0.03, 0.045, 0.08],
            sample_sizes: vec![3, 5, 8, 16],
        }
    }
}

impl ExperimentConfig {
    /// Parses `text`, then applies `key=value` overrides whose values are
    /// TOML literals (bare words are taken as strings).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!("{k}: nested tables are not supported")));
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let value = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if ![16, 32, 64].contains(&self.size) {
            return Err(Error::Config(format!("size: {} not in {{16, 32, 64}}", self.size)));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("lambdas: need at least one positive value".into()));
        }
        if self.sample_sizes.contains(&0) {
            return Err(Error::Config("sample_sizes: values must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            mode: self.mode,
            k: self.k,
            l: self.l,
            surrogate_style: self.surrogate_style,
            lr_base: self.lr_base,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            epochs: self.epochs,
            max_steps: self.max_steps,
            warm_fraction: self.warm_fraction,
            lr_floor_fraction: self.lr_floor_fraction,
            scale_lr_with_samples: self.scale_lr_with_samples,
            batch_size: self.batch_size,
            seed: self.seed,
            clip_norm: self.clip_norm,
            checkpoint_every: self.checkpoint_every,
            snr_replicates: self.snr_replicates,
        }
    }

    pub fn dataset(&self) -> DatasetRef {
        let source = match &self.image_dir {
            Some(path) => DataSource::ImageDir { path: path.clone() },
            None => DataSource::Synthetic {
                kind: self.kind,
                count: self.count,
                size: self.size,
                seed: self.data_seed,
                corr_len: self.corr_len,
                period: self.period,
            },
        };
        DatasetRef { source, patch_size: self.patch_size, channels: self.channels }
    }

    pub fn eval_dataset(&self) -> DatasetRef {
        match &self.image_dir {
            Some(_) => self.dataset(),
            None => DatasetRef {
                source: DataSource::Synthetic {
                    kind: self.kind,
                    count: self.eval_count,
                    size: self.size,
                    seed: self.eval_seed,
                    corr_len: self.corr_len,
                    period: self.period,
                },
                patch_size: self.patch_size,
                channels: self.channels,
            },
        }
    }

    /// The checkpoint if one is configured, otherwise a fresh model.
    pub fn model(&self) -> Result<HierModel> {
        if let Some(p) = &self.checkpoint {
            return HierModel::load(p);
        }
        match self.arch {
            ArchPreset::Toy => {
                let mut a = ArchConfig::toy();
                a.channels = self.channels;
                HierModel::new(a, self.direct_y, self.model_seed)
            }
            ArchPreset::Affine => HierModel::identity_like(self.channels, self.direct_y, self.model_seed),
            ArchPreset::Micro => Ok(presets::micro_model(self.direct_y)),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_apply_after_file() {
        let c = ExperimentConfig::parse("lambda = 0.03\nmode = \"mix\"\nk = 4", &["k=8".into(), "mode=dms".into()])
            .unwrap();
        assert_eq!((c.lambda, c.k, c.mode), (0.03, 8, GridMode::Dms));
    }

    #[test]
    fn unknown_and_nested_keys_rejected() {
        let e = ExperimentConfig::parse("lamda = 0.1", &[]).unwrap_err();
        assert!(e.to_string().contains("lamda"), "{e}");
        assert!(ExperimentConfig::parse("[train]\nlambda = 0.1", &[]).is_err());
        assert!(ExperimentConfig::parse("", &["size=20".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }
}
