//! Run configuration: one strict JSON document per experiment. Unknown keys
//! are rejected everywhere so a config snapshot is trustworthy provenance.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use eegkit::dataio::{PreprocessProfile, SyntheticSpec};
use eegkit::ete::EteConfig;
use eegkit::train::{FinetuneConfig, PretrainConfig, ScalingLadder};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingLadder>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub ete: EteConfig,
    pub teg_layers: usize,
}

/// A dataset reference: a synthetic spec to generate, or an EEGB directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PreprocessProfile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<DataSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Pretrain,
    FinetuneJoint,
    FinetuneSeparate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneConfig>,
    /// Encoder checkpoint to fine-tune from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, crate::CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            crate::CliError::Data(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| crate::CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply a command-line seed override to every seeded section.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(p) = &mut self.train.pretrain {
            p.seed = seed;
        }
        if let Some(f) = &mut self.train.finetune {
            f.seed = seed;
        }
        if let Some(d) = &mut self.data.pretrain {
            if let Some(s) = &mut d.synthetic {
                s.seed = seed;
            }
        }
    }
}
