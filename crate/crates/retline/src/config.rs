//! Run configuration: a TOML file of `key = value` tables.
//!
//! Every field has a default, unknown keys are rejected, and the resolved
//! configuration is echoed next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use retline_core::decode::Backend;
use retline_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the config path (and nothing else).
pub const CONFIG_ENV: &str = "RETLINE_CONFIG";
pub const ECHO_FILE: &str = "config.echo.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Epochs between warm restarts of the cosine schedule.
    pub restart_period: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub augment: bool,
    /// Stop once held-out CER is at or below this value.
    pub target_cer: Option<f64>,
    /// Stop once process CPU time exceeds this many seconds.
    pub max_cpu_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_max: 1e-4,
            lr_min: 1e-6,
            restart_period: 5.0,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            label_smoothing: 0.4,
            augment: true,
            target_cer: None,
            max_cpu_seconds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Characters of the synthetic corpus.
    pub alphabet: String,
    pub min_len: usize,
    pub max_len: usize,
    pub train_lines: usize,
    pub val_lines: usize,
    /// Existing manifests; when set they replace synthetic generation.
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            alphabet: "abcdefghijkl".into(),
            min_len: 4,
            max_len: 16,
            train_lines: 512,
            val_lines: 64,
            train_manifest: None,
            val_manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub backend: Option<Backend>,
    /// Decoding steps; `None` means the model's `max_text_len`.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            backend: None,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid configuration")?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// `--config` if given, else the environment override, else defaults.
    pub fn resolve(flag: Option<&Path>) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match flag.map(Path::to_path_buf).or(env) {
            Some(p) => Self::load(&p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let p = dir.join(ECHO_FILE);
        fs::write(&p, self.to_toml()?)?;
        Ok(p)
    }
}
