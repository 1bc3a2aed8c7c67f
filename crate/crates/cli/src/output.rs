//! Output directory bookkeeping: hash-stamped files, manifest, cleanup on failure.

use std::fs;
use std::path::PathBuf;

use tfrmt_core::config::{ExperimentConfig, RunManifest};
use tfrmt_core::io::{encode, write_atomic, GridHeader};
use tfrmt_core::Result;

pub struct Outputs {
    dir: PathBuf,
    config_hash: String,
    manifest: RunManifest,
    created: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        fs::create_dir_all(&cfg.output.dir)?;
        Ok(Outputs {
            dir: cfg.output.dir.clone(),
            config_hash: cfg.hash(),
            manifest: RunManifest::new(command, cfg),
            created: Vec::new(),
        })
    }

    pub fn add_seeds(&mut self, seeds: impl IntoIterator<Item = u64>) {
        self.manifest.seeds.extend(seeds);
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        self.created.push(path.clone());
        write_atomic(&path, bytes)?;
        self.manifest.record(name, bytes);
        Ok(path)
    }

    /// Grid file with the config hash stamped into its header.
    pub fn grid(&mut self, name: &str, header: GridHeader, payload: &[f64]) -> Result<PathBuf> {
        let header = header.with_meta("config_hash", &self.config_hash)?;
        let bytes = encode(&header, payload)?;
        self.bytes(name, &bytes)
    }

    pub fn json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.bytes(name, &bytes)
    }

    /// Written outside the manifest (wall-clock data differs between runs).
    pub fn unrecorded_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.dir.join(name);
        self.created.push(path.clone());
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let name = format!("manifest_{}.json", self.manifest.command);
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        let path = self.dir.join(&name);
        self.created.push(path.clone());
        write_atomic(&path, &bytes)?;
        self.created.clear();
        Ok(path)
    }
}

impl Drop for Outputs {
    /// Anything still listed belongs to a run that did not finish.
    fn drop(&mut self) {
        for p in &self.created {
            let _ = fs::remove_file(p);
        }
    }
}
