//! Experiment configuration and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth::DepthGrid;
use crate::env::Environment;
use crate::error::{invalid, Result};
use crate::modes::ModeCount;
use crate::pe::PeConfig;
use crate::rmt::{stream_seed, EnsembleSpec};
use crate::timefront::{DepthSelection, KGrid, SourceSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub depth_grid: DepthGrid,
    pub pe: PeConfig,
    /// Wavenumbers for runs that propagate with the PE.
    pub k_count_pe: usize,
    /// Wavenumbers for random-matrix-only runs.
    pub k_count_rmt: usize,
    pub modes: ModeCount,
    /// Depth samples kept in timefront outputs.
    pub depths: DepthSelection,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            depth_grid: DepthGrid::default(),
            pe: PeConfig::default(),
            k_count_pe: 128,
            k_count_rmt: 512,
            modes: ModeCount::Trapped,
            depths: DepthSelection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Depths (km) of CSV intensity traces.
    pub trace_depths: Vec<f64>,
    /// Write dB-magnitude CSV matrices next to intensity grids.
    pub db_csv: bool,
    pub db_floor: f64,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("out"),
            trace_depths: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            db_csv: true,
            db_floor: -60.0,
        }
    }
}

/// Everything a run depends on. `ensemble.strength` scales the internal
/// waves on both paths: the PE sound-speed perturbation and every `s_mn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub environment: Environment,
    pub source: SourceSpec,
    pub numerics: Numerics,
    pub ensemble: EnsembleSpec,
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            environment: Environment::default(),
            source: SourceSpec::default(),
            numerics: Numerics::default(),
            ensemble: EnsembleSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        let grid = &self.numerics.depth_grid;
        self.environment.validate()?;
        grid.validate()?;
        self.source.validate(grid)?;
        self.numerics.pe.validate(&self.environment.guide, grid)?;
        self.k_grid_pe()?;
        self.k_grid_rmt()?;
        self.numerics.depths.indices(grid)?;
        self.ensemble.validate()?;
        if let Some(z) = self
            .output
            .trace_depths
            .iter()
            .find(|z| !(**z >= grid.z_min && **z <= grid.z_max))
        {
            return Err(invalid("output.trace_depths", format!("{z} km is outside the depth window")));
        }
        Ok(())
    }

    pub fn k_grid_pe(&self) -> Result<KGrid> {
        KGrid::new(&self.source, self.environment.guide.c0, self.numerics.k_count_pe)
    }

    pub fn k_grid_rmt(&self) -> Result<KGrid> {
        KGrid::new(&self.source, self.environment.guide.c0, self.numerics.k_count_rmt)
    }

    /// Total range `blocks * block_range`.
    pub fn range(&self) -> f64 {
        self.ensemble.range()
    }

    /// Sets the block count so that the total range is `range`, which must
    /// be a whole number of blocks.
    pub fn set_range(&mut self, range: f64) -> Result<()> {
        let blocks = (range / self.ensemble.block_range).round();
        if !(range > 0.0) || blocks < 1.0 || (blocks * self.ensemble.block_range - range).abs() > 1e-9 * range {
            return Err(invalid(
                "range",
                format!(
                    "{range} km is not a positive multiple of the block range {} km",
                    self.ensemble.block_range
                ),
            ));
        }
        self.ensemble.blocks = blocks as usize;
        Ok(())
    }

    /// SHA-256 of the canonical JSON, output directory excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output.dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Internal-wave seed of PE member `member`.
    pub fn iw_seed(&self, member: u64) -> u64 {
        member_iw_seed(self.ensemble.master_seed, member)
    }
}

/// Internal-wave realization seeds live in their own stream family.
pub fn member_iw_seed(master: u64, member: u64) -> u64 {
    ChaCha8Rng::from_seed(stream_seed(master, member, u64::MAX, u64::MAX)).next_u64()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Record of a run: no clock readings, so identical runs give identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub members: usize,
    pub range_km: f64,
    pub strength: f64,
    /// Seeds actually used, e.g. internal-wave realizations.
    pub seeds: Vec<u64>,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        RunManifest {
            tool: "tfrmt".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: cfg.hash(),
            master_seed: cfg.ensemble.master_seed,
            members: cfg.ensemble.members,
            range_km: cfg.range(),
            strength: cfg.ensemble.strength,
            seeds: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"ensemble": {"members": 7}, "source": {"f0": 50.0}}"#).unwrap();
        assert_eq!(cfg.ensemble.members, 7);
        assert_eq!(cfg.ensemble.block_range, 50.0);
        assert_eq!(cfg.source.f0, 50.0);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn diagnostics_name_the_field() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"ensemble": {"memberz": 7}}"#).unwrap_err();
        assert!(err.to_string().contains("memberz"));

        let mut cfg = ExperimentConfig::default();
        cfg.source.sigma_f = 30.0;
        match cfg.validate() {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "source.f0"),
            other => panic!("{other:?}"),
        }
        let mut cfg = ExperimentConfig::default();
        cfg.output.trace_depths.push(20.0);
        assert!(matches!(cfg.validate(), Err(Error::InvalidParameter { field, .. }) if field == "output.trace_depths"));
        let mut cfg = ExperimentConfig::default();
        cfg.schema_version = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.ensemble.master_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn range_must_be_whole_blocks() {
        let mut cfg = ExperimentConfig::default();
        cfg.set_range(1000.0).unwrap();
        assert_eq!(cfg.ensemble.blocks, 20);
        assert_eq!(cfg.range(), 1000.0);
        assert!(cfg.set_range(75.0).is_err());
        assert!(cfg.set_range(0.0).is_err());
    }

    #[test]
    fn member_seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|m| member_iw_seed(1, m)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(member_iw_seed(1, 0), member_iw_seed(2, 0));
    }
}
