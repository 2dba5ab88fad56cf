//! Run configuration: one JSON document covering every stage.

use std::path::{Path, PathBuf};

use leadi_core::dataio::{ColumnMap, SplitFractions};
use leadi_core::delineate::DelineatorConfig;
use leadi_core::model::{IKresConfig, Task};
use leadi_core::sigproc::PreprocessConfig;
use leadi_core::synthgen::ParamDistribution;
use leadi_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), cache_dir: "cache".into(), out_dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub distribution: ParamDistribution,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 5000, distribution: ParamDistribution::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Label table, relative to the data directory.
    pub labels_file: String,
    pub columns: ColumnMap,
    /// Header path relative to the data directory; `{id}` is replaced by the
    /// record id.
    pub locator_pattern: String,
    pub lead: String,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            labels_file: "labels.csv".into(),
            columns: ColumnMap::synthetic(),
            locator_pattern: "records/{id}.hea".into(),
            lead: "I".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub kde_grid: usize,
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { kde_grid: 128, plots: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub seed: u64,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitFractions,
    pub model: IKresConfig,
    pub train: TrainConfig,
    pub baseline: DelineatorConfig,
    pub tasks: Vec<Task>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seed: 0,
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            preprocess: PreprocessConfig::default(),
            split: SplitFractions::default(),
            model: IKresConfig::default(),
            train: TrainConfig::default(),
            baseline: DelineatorConfig::default(),
            tasks: Task::ALL.to_vec(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section; messages carry the field path.
    pub fn validate(&self) -> Result<(), CliError> {
        let at = |field: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{field}: {e}"));
        if self.synth.n == 0 {
            return Err(at("synth.n", &"must be at least 1"));
        }
        self.preprocess.validate().map_err(|e| at("preprocess", &e))?;
        self.model.validate().map_err(|e| at("model", &e))?;
        if self.model.input_len != self.preprocess.target_samples {
            return Err(at(
                "model.input_len",
                &format!("{} differs from preprocess.target_samples {}", self.model.input_len, self.preprocess.target_samples),
            ));
        }
        self.train.validate().map_err(|e| at("train", &e))?;
        let f = self.split;
        if [f.train, f.validation, f.holdout].iter().any(|v| !(*v > 0.0)) || (f.train + f.validation + f.holdout - 1.0).abs() > 1e-9 {
            return Err(at("split", &"fractions must be positive and sum to 1"));
        }
        if self.tasks.is_empty() {
            return Err(at("tasks", &"select at least one task"));
        }
        if self.eval.kde_grid < 2 {
            return Err(at("eval.kde_grid", &"must be at least 2"));
        }
        if !self.ingest.locator_pattern.contains("{id}") {
            return Err(at("ingest.locator_pattern", &"must contain {id}"));
        }
        Ok(())
    }

    /// SHA-256 (hex) of the canonical JSON of everything except `paths`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }

    /// Per-task training seed derived from the run seed.
    pub fn task_seed(&self, task: Task) -> u64 {
        let k = Task::ALL.iter().position(|&t| t == task).unwrap_or(0) as u64;
        self.seed.wrapping_mul(4).wrapping_add(k)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
