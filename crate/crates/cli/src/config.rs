use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scargan::augment::SimulationParams;
use scargan::dataset::CorpusConfig;
use scargan::maskgan::MaskGanConfig;
use scargan::refinegan::RefineGanConfig;
use scargan::segnet::{CvConfig, SegTrainConfig};
use scargan::study::DEFAULT_ITEMS_PER_CLASS;

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

/// One file configures every stage. Each subcommand reads its own sections
/// and writes the whole resolved config next to its outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the seed of whichever stage runs.
    pub seed: Option<u64>,
    /// Base for relative paths; `SCARGAN_DATA_ROOT` when unset.
    pub data_root: Option<PathBuf>,
    pub phantom: CorpusConfig,
    pub maskgan: MaskGanConfig,
    pub refinegan: RefineGanConfig,
    pub simulation: SimulationParams,
    pub selection: SelectionConfig,
    pub pretrain: PretrainConfig,
    pub finetune: SegTrainConfig,
    pub cv: CvConfig,
    pub study: StudyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Scar-free masks used to compare snapshot shapes.
    pub probes: usize,
    /// Explicit snapshot ids; replaces the automatic choice when non-empty.
    pub ids: Vec<String>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { probes: 16, ids: Vec::new() }
    }
}

/// Pretraining corpus: phantoms in the frame of the experiment's data with scar rendered invisible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub n_slices: usize,
    pub seed: u64,
    pub train: SegTrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { n_slices: 200, seed: 1_000_003, train: SegTrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub addr: String,
    pub n_each: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), n_each: DEFAULT_ITEMS_PER_CLASS }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
        let path = dir.join(RESOLVED_CONFIG);
        let json = serde_json::to_vec_pretty(self).expect("config serializes");
        std::fs::write(&path, json).map_err(|e| CliError::Io(path.clone(), e))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        let base = self.data_root.clone().or_else(|| std::env::var_os("SCARGAN_DATA_ROOT").map(PathBuf::from));
        match base {
            Some(b) => b.join(p),
            None => p.to_path_buf(),
        }
    }
}
