//! Experiment configuration files.
//!
//! A config is one JSON document with the sections `data`, `model`,
//! `federation` and the optional `output`, `sweep` and `probe`. Every
//! problem is reported with the dotted key path it concerns.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use specfed_core::federation::{ExperimentConfig, FederationConfig, ModelConfig, PartitionConfig};
use specfed_core::models::TaskKind;
use specfed_core::synthdata::{DataConfig, ModalityMode};

use crate::CliError;

/// Keys that must be spelled out in every config file.
pub const REQUIRED_KEYS: &[&str] = &[
    "data",
    "model",
    "federation",
    "federation.rounds",
    "federation.num_clients",
    "federation.lr",
    "federation.lambda",
    "federation.top_k",
    "federation.local_epochs",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Used when neither `--out` nor `SPECFED_OUT` is given.
    pub dir: Option<PathBuf>,
    pub svg: bool,
    pub checkpoint: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            svg: true,
            checkpoint: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    TopK,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lambda" => Some(SweepAxis::Lambda),
            "top_k" => Some(SweepAxis::TopK),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::TopK => "top_k",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub pairs: usize,
    pub include_same: bool,
    pub cutoff: f64,
    /// Write per-pair magnitude spectra as PGM files.
    pub images: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            include_same: false,
            cutoff: specfed_core::spectral::DEFAULT_CUTOFF,
            images: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            key: "<file>".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Config {
            key: "<document>".into(),
            message: format!("invalid JSON: {e}"),
        })?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, CliError> {
        for key in REQUIRED_KEYS {
            if lookup(&value, key).is_none() {
                return Err(config_error(key, "required key is missing"));
            }
        }
        let config: Config = serde_path_to_error::deserialize(value).map_err(|e| {
            let key = e.path().to_string();
            CliError::Config {
                key: if key == "." { "<document>".into() } else { key },
                message: e.into_inner().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    /// The core experiment description, optionally with the seed replaced.
    pub fn experiment(&self, seed: Option<u64>) -> ExperimentConfig {
        let mut e = ExperimentConfig {
            data: self.data.clone(),
            model: self.model.clone(),
            federation: self.federation.clone(),
        };
        if let Some(s) = seed {
            e.federation.seed = s;
        }
        e
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        check(d.height > 0, "data.height", "must be positive")?;
        check(d.width > 0, "data.width", "must be positive")?;
        check(d.num_classes >= 2, "data.num_classes", "must be at least 2")?;
        check(d.num_modalities >= 1, "data.num_modalities", "must be at least 1")?;
        check(d.hr_scale >= 1, "data.hr_scale", "must be at least 1")?;
        if let Some(m) = &d.modalities {
            check(m.len() == d.num_modalities, "data.modalities", "length must equal data.num_modalities")?;
            for (i, spec) in m.iter().enumerate() {
                check(spec.carrier >= 0.5, &format!("data.modalities[{i}].carrier"), "must be >= 0.5 (fraction of Nyquist)")?;
                check(spec.gamma > 0.0, &format!("data.modalities[{i}].gamma"), "must be positive")?;
                check(spec.noise_scale >= 0.0, &format!("data.modalities[{i}].noise_scale"), "must be non-negative")?;
            }
        }

        let m = &self.model;
        let p = m.backbone.patch_size;
        check(p > 0, "model.backbone.patch_size", "must be positive")?;
        check(
            d.height % p == 0 && d.width % p == 0,
            "model.backbone.patch_size",
            &format!("must divide the image size {}x{}", d.height, d.width),
        )?;
        check(m.backbone.dim > 0, "model.backbone.dim", "must be positive")?;
        check(m.tokenizer.hidden > 0, "model.tokenizer.hidden", "must be positive")?;
        check(m.tokenizer.bands > 0, "model.tokenizer.bands", "must be positive")?;
        check(m.tokenizer.sectors > 0, "model.tokenizer.sectors", "must be positive")?;
        check(m.tokenizer.cutoff > 0.0 && m.tokenizer.cutoff <= 1.0, "model.tokenizer.cutoff", "must lie in (0, 1]")?;
        check(m.fusion.head_dim != Some(0), "model.fusion.head_dim", "must be positive")?;
        if m.head.kind == TaskKind::Classification {
            check(m.head.num_classes == d.num_classes, "model.head.num_classes", "must equal data.num_classes")?;
        }
        check(m.head.sr_scale == d.hr_scale, "model.head.sr_scale", "must equal data.hr_scale")?;

        let f = &self.federation;
        check(f.num_clients >= 1, "federation.num_clients", "must be at least 1")?;
        check(f.rounds >= 1, "federation.rounds", "must be at least 1")?;
        check(
            f.participation_ratio > 0.0 && f.participation_ratio <= 1.0,
            "federation.participation_ratio",
            "must lie in (0, 1]",
        )?;
        check(f.local_epochs >= 1, "federation.local_epochs", "must be at least 1")?;
        check(f.lr > 0.0 && f.lr.is_finite(), "federation.lr", "must be positive")?;
        check(f.lambda >= 0.0 && f.lambda.is_finite(), "federation.lambda", "must be non-negative")?;
        check(f.top_k >= 1, "federation.top_k", "must be at least 1")?;
        check(f.batch_size >= 1, "federation.batch_size", "must be at least 1")?;
        check((0.0..1.0).contains(&f.test_fraction), "federation.test_fraction", "must lie in [0, 1)")?;
        check(f.bank.rho > 0.0, "federation.bank.rho", "must be positive")?;
        check((0.0..=1.0).contains(&f.bank.delta), "federation.bank.delta", "must lie in [0, 1]")?;
        check(f.bank.window >= 1, "federation.bank.window", "must be at least 1")?;
        check(f.bank.max_size != Some(0), "federation.bank.max_size", "must be positive")?;
        match &f.partition {
            PartitionConfig::Dirichlet { gamma } => {
                check(*gamma > 0.0 && gamma.is_finite(), "federation.partition.gamma", "must be positive")?;
                check(f.num_clients <= d.num_samples, "federation.num_clients", "exceeds data.num_samples")?;
            }
            PartitionConfig::Modality { mode } => {
                if let ModalityMode::Overlapping { fraction } = mode {
                    check((0.0..=1.0).contains(fraction), "federation.partition.mode.fraction", "must lie in [0, 1]")?;
                } else {
                    check(
                        d.num_modalities >= f.num_clients,
                        "federation.partition.mode",
                        "disjoint split needs at least as many modalities as clients",
                    )?;
                }
            }
        }

        if let Some(s) = &self.sweep {
            validate_sweep_values(s.axis, &s.values, "sweep.values")?;
        }
        check(self.probe.cutoff > 0.0 && self.probe.cutoff <= 1.0, "probe.cutoff", "must lie in (0, 1]")?;

        self.experiment(None).validate().map_err(|e| CliError::Config {
            key: "<config>".into(),
            message: e.to_string(),
        })
    }
}

pub fn validate_sweep_values(axis: SweepAxis, values: &[f64], key: &str) -> Result<(), CliError> {
    for (i, &v) in values.iter().enumerate() {
        let key = format!("{key}[{i}]");
        match axis {
            SweepAxis::Lambda => check(v >= 0.0 && v.is_finite(), &key, "lambda must be non-negative")?,
            SweepAxis::TopK => check(v >= 1.0 && v.fract() == 0.0, &key, "top_k must be a positive integer")?,
        }
    }
    Ok(())
}

fn check(ok: bool, key: &str, message: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(config_error(key, message))
    }
}

fn config_error(key: &str, message: &str) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: message.to_string(),
    }
}

fn lookup<'a>(value: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(value, |v, k| v.get(k))
}
