use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use isorec::diffusion::{DenoiserConfig, PriorTrainConfig};
use isorec::simulate::BundleConfig;
use isorec::{DegradationOp, InrConfig, SdsConfig};

/// Read a TOML or JSON config (by extension); no path means all defaults.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "json" => {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        }
        "toml" | "" => toml::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        other => bail!("unsupported config extension {other:?} (use .toml or .json)"),
    }
}

pub type SimulateConfig = BundleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPriorConfig {
    /// A simulate bundle directory or a single `.volume`.
    pub data: PathBuf,
    /// Patch extraction settings, used when `data` is a plain volume.
    pub patch: usize,
    pub patch_count: usize,
    pub patch_seed: u64,
    pub model: DenoiserConfig,
    pub train: PriorTrainConfig,
    pub validation_count: usize,
}

impl Default for TrainPriorConfig {
    fn default() -> Self {
        TrainPriorConfig {
            data: PathBuf::from("bundle"),
            patch: 32,
            patch_count: 2000,
            patch_seed: 1,
            model: DenoiserConfig::default(),
            train: PriorTrainConfig::default(),
            validation_count: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub measurements: PathBuf,
    /// Denoiser checkpoint; required when the regularizer is `sds`.
    pub prior: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Defaults to the degradation recorded in a neighbouring `bundle.json`.
    pub degradation: Option<DegradationOp>,
    pub inr: InrConfig,
    pub sds: SdsConfig,
    /// Continue from `latest.ckpt` in the output directory when present.
    pub resume: bool,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            measurements: PathBuf::from("bundle/aniso.volume"),
            prior: Some(PathBuf::from("prior/prior.ckpt")),
            ground_truth: None,
            degradation: None,
            inr: InrConfig::default(),
            sds: SdsConfig::default(),
            resume: false,
        }
    }
}
