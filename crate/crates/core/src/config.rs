//! Run configuration: one TOML document drives every stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::ged::{EditCostModel, DEFAULT_SIZE_CAP};
use crate::graph::SynthParams;
use crate::model::{HeadConfig, ModelConfig};
use crate::nearness::FixingConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Existing JSONL corpus; when absent a synthetic one is generated.
    pub path: Option<PathBuf>,
    pub count: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub edge_prob: f64,
    /// One-hot node label alphabet size for synthetic graphs; 0 for none.
    pub labels: usize,
    /// Generation and split seed.
    pub seed: u64,
    /// Train, validation, test fractions.
    pub split: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let s = SynthParams::default();
        CorpusConfig {
            path: None,
            count: s.count,
            size_min: s.size_min,
            size_max: s.size_max,
            edge_prob: s.edge_prob,
            labels: s.labels,
            seed: s.seed,
            split: [0.6, 0.2, 0.2],
        }
    }
}

impl CorpusConfig {
    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            count: self.count,
            size_min: self.size_min,
            size_max: self.size_max,
            edge_prob: self.edge_prob,
            labels: self.labels,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GedConfig {
    pub size_cap: usize,
    pub costs: EditCostModel,
    /// External label file used instead of computing exact distances.
    pub labels_path: Option<PathBuf>,
}

impl Default for GedConfig {
    fn default() -> Self {
        GedConfig {
            size_cap: DEFAULT_SIZE_CAP,
            costs: EditCostModel::default(),
            labels_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub ged: GedConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub fix: FixingConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        self.ged.costs.validate()?;
        if self.eval.k == 0 {
            return Err(Error::InvalidArgument("eval.k must be positive".into()));
        }
        Ok(())
    }

    /// Sets both the corpus and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }
}
