//! Experiment files.
//!
//! ```toml
//! [corpus]
//! path = "text.txt"          # relative to this file
//! vocab = "char"             # or "byte"
//! split = [0.9, 0.05, 0.05]
//!
//! [model]                    # any ModelConfig field; vocab_size comes from the corpus
//! n_layers = 2
//!
//! [train]                    # any TrainConfig field
//! steps = 1000
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use segrec_core::corpus::VocabMode;
use segrec_core::model::ModelConfig;
use segrec_core::recl::ReclConfig;
use segrec_core::trainer::TrainConfig;

use crate::Failure;

pub const DEFAULT_SPLIT: [f64; 3] = [0.9, 0.05, 0.05];

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_vocab")]
    pub vocab: VocabMode,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_vocab() -> VocabMode {
    VocabMode::Char
}

fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
        let mut exp: Experiment =
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("bad experiment file {}: {e}", path.display())))?;
        if exp.corpus.path.is_relative() {
            if let Some(dir) = path.parent() {
                exp.corpus.path = dir.join(&exp.corpus.path);
            }
        }
        Ok(exp)
    }
}

/// RECL settings where every field is optional; absent fields fall back to
/// the grid of the loss tables.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReclOverrides {
    pub r: Option<f64>,
    pub delta: Option<usize>,
    pub initial_c: Option<usize>,
    pub threshold: Option<f64>,
    pub max_c: Option<usize>,
}

impl ReclOverrides {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("bad RECL file {}: {e}", path.display())))
    }

    /// Later fields win.
    pub fn merge(self, other: ReclOverrides) -> ReclOverrides {
        ReclOverrides {
            r: other.r.or(self.r),
            delta: other.delta.or(self.delta),
            initial_c: other.initial_c.or(self.initial_c),
            threshold: other.threshold.or(self.threshold),
            max_c: other.max_c.or(self.max_c),
        }
    }

    /// Fills gaps from the ascending context grid of the tables.
    pub fn resolve(&self, contexts: &[usize]) -> ReclConfig {
        let d = ReclConfig::default();
        let first = contexts.first().copied().unwrap_or(d.initial_c);
        let step = if contexts.len() > 1 { contexts[1] - contexts[0] } else { d.delta };
        ReclConfig {
            r: self.r.unwrap_or(d.r),
            delta: self.delta.unwrap_or(step),
            initial_c: self.initial_c.unwrap_or(first),
            threshold: self.threshold.unwrap_or(d.threshold),
            max_c: self.max_c.unwrap_or_else(|| contexts.last().copied().unwrap_or(d.max_c)),
        }
    }
}
