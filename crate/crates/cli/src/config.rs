//! The run config: TOML file, then `CLMRKIT_*` environment, then flags.

use std::path::{Path, PathBuf};

use clmrkit::augment::{canonical_crop_length, ChainConfig};
use clmrkit::autodiff::AdamConfig;
use clmrkit::eval::ProbeConfig;
use clmrkit::model::{EncoderConfig, ProbeKind, SpectrumConfig, MLP_HIDDEN};
use clmrkit::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {message}")]
    InvalidValue { key: String, message: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Canonical,
    #[default]
    Desk,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    /// Overrides the preset's input length (and the crop length).
    pub input_length: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub projection_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub optimizer: AdamConfig,
    pub checkpoint_interval: usize,
    pub asymmetric: bool,
    pub prefetch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            temperature: t.temperature,
            optimizer: t.optimizer,
            checkpoint_interval: t.checkpoint_interval,
            asymmetric: t.asymmetric,
            prefetch: t.prefetch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub head: ProbeKind,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seeds: usize,
    /// Fraction of labeled training songs.
    pub fraction: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            head: p.head,
            hidden: MLP_HIDDEN,
            lr: p.lr,
            weight_decay: p.weight_decay,
            patience: p.patience,
            max_epochs: p.max_epochs,
            batch_size: p.batch_size,
            seeds: p.seeds,
            fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub manifest: Option<PathBuf>,
    pub top_k: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            manifest: None,
            top_k: 50,
        }
    }
}

/// Gradient-ascent settings for filter spectra; the run seed seeds the probe
/// waveforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub probe_length: usize,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        let s = SpectrumConfig::default();
        Self {
            probe_length: s.probe_length,
            steps: s.steps,
            step_size: s.step_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub sample_rate: u32,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augment: ChainConfig,
    pub probe: ProbeSection,
    pub dataset: DatasetSection,
    pub spectrum: SpectrumSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            workers: 0,
            sample_rate: 22050,
            model: ModelSection::default(),
            train: TrainSection::default(),
            augment: ChainConfig::default(),
            probe: ProbeSection::default(),
            dataset: DatasetSection::default(),
            spectrum: SpectrumSection::default(),
        }
    }
}

fn invalid(key: &str, message: impl ToString) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        message: message.to_string(),
    }
}

impl RunConfig {
    pub fn encoder(&self) -> Result<EncoderConfig, ConfigError> {
        let mut c = match self.model.preset {
            Preset::Desk => EncoderConfig::desk(),
            Preset::Canonical => {
                let len = canonical_crop_length(self.sample_rate).unwrap_or(59049);
                EncoderConfig::canonical().with_input_length(len)
            }
        };
        if let Some(len) = self.model.input_length {
            c.input_length = len;
        }
        if let Some(ch) = &self.model.channels {
            c.channels = ch.clone();
        }
        if let Some(p) = self.model.projection_dim {
            c.projection_dim = p;
        }
        c.validate().map_err(|e| invalid("model", e))?;
        Ok(c)
    }

    pub fn chain_config(&self) -> Result<ChainConfig, ConfigError> {
        let len = self.encoder()?.input_length;
        let mut chain = self.augment.clone();
        match chain.crop_length {
            Some(c) if c != len => {
                return Err(invalid(
                    "augment.crop_length",
                    format!("{c} differs from the encoder input length {len}"),
                ))
            }
            _ => chain.crop_length = Some(len),
        }
        Ok(chain)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            temperature: t.temperature,
            optimizer: t.optimizer,
            seed: self.seed,
            checkpoint_interval: t.checkpoint_interval,
            asymmetric: t.asymmetric,
            deterministic: self.deterministic,
            workers: self.workers,
            prefetch: t.prefetch,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            head: p.head,
            hidden: p.hidden,
            lr: p.lr,
            weight_decay: p.weight_decay,
            patience: p.patience,
            max_epochs: p.max_epochs,
            batch_size: p.batch_size,
            seeds: p.seeds,
            seed: self.seed,
        }
    }

    pub fn spectrum_config(&self) -> SpectrumConfig {
        SpectrumConfig {
            probe_length: self.spectrum.probe_length,
            steps: self.spectrum.steps,
            step_size: self.spectrum.step_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sample_rate == 0 {
            return Err(invalid("sample_rate", "must be positive"));
        }
        self.chain_config()?.build(self.sample_rate).map_err(|e| invalid("augment", e))?;
        let train = self.train_config();
        train.validate().map_err(|e| {
            let key = if !(train.temperature > 0.0 && train.temperature.is_finite()) {
                "train.temperature"
            } else {
                "train"
            };
            invalid(key, e)
        })?;
        self.probe_config().validate().map_err(|e| invalid("probe", e))?;
        if !(self.probe.fraction > 0.0 && self.probe.fraction <= 1.0) {
            return Err(invalid("probe.fraction", "must lie in (0, 1]"));
        }
        if self.dataset.top_k == 0 {
            return Err(invalid("dataset.top_k", "must be positive"));
        }
        if self.spectrum.probe_length == 0 || self.spectrum.step_size.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(invalid("spectrum", "probe_length and step_size must be positive"));
        }
        Ok(())
    }
}

/// A dotted `key = value` override, e.g. `train.epochs = 50`.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: &str, value: impl Into<toml::Value>) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
        }
    }

    /// Parses `key=value`; the value is read as a TOML literal, falling back
    /// to a plain string.
    pub fn parse(spec: &str) -> Result<Self, ConfigError> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse(format!("override {spec:?} is not key=value")))?;
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Self::new(key.trim(), value))
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn classify(err: toml::de::Error) -> ConfigError {
    let msg = err.message().to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let field = rest.split('`').next().unwrap_or(rest);
        return ConfigError::UnknownKey(field.to_string());
    }
    if msg.contains("unknown variant") || msg.contains("invalid type") || msg.contains("invalid value") {
        return ConfigError::InvalidValue {
            key: "config".into(),
            message: msg,
        };
    }
    ConfigError::Parse(err.to_string())
}

/// Reads `file` (if any), applies `overrides` in order and validates.
pub fn load_config(file: Option<&Path>, overrides: &[Override]) -> Result<RunConfig, ConfigError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            text.parse::<toml::Table>().map_err(|e| ConfigError::Parse(e.to_string()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        set_path(&mut table, &o.key, o.value.clone())?;
    }
    let config: RunConfig = RunConfig::deserialize(table).map_err(classify)?;
    config.validate()?;
    Ok(config)
}
