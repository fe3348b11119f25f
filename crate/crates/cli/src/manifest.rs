use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use isorec::io;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub summary: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> anyhow::Result<Self> {
        let bytes = serde_json::to_vec(config)?;
        Ok(Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_hash: io::hash_bytes(&bytes),
            config: serde_json::from_slice(&bytes)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(name.into(), io::hash_path(path)?);
        Ok(())
    }

    /// Record an output by its file name inside `dir`.
    pub fn output(&mut self, dir: &Path, name: &str) -> anyhow::Result<()> {
        self.outputs
            .insert(name.into(), io::hash_path(&dir.join(name))?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> anyhow::Result<()> {
        self.summary
            .insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        io::write_file_atomic(&dir.join(MANIFEST_FILE), &bytes)?;
        Ok(())
    }
}

/// Wall-clock durations, kept apart from the manifest so reruns stay
/// byte-identical everywhere else.
pub fn write_timing(dir: &Path, phases: &[(&str, Duration)]) -> anyhow::Result<()> {
    let map: BTreeMap<&str, f64> = phases.iter().map(|(k, d)| (*k, d.as_secs_f64())).collect();
    io::write_file_atomic(&dir.join(TIMING_FILE), &serde_json::to_vec_pretty(&map)?)?;
    Ok(())
}
