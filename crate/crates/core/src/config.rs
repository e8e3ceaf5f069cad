//! One TOML document describing a full experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::FaithfulnessConfig;
use crate::inference::FewShotProtocol;
use crate::model::ModelConfig;
use crate::signal::{split_dataset, Dataset, DomainRole, SplitRatios};
use crate::synth::SynthConfig;
use crate::trainer::{TrainConfig, MAX_SEED};

/// Stratified train/validation/test split of the source domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let r = SplitRatios::default();
        SplitConfig {
            train: r.train,
            val: r.val,
            test: r.test,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> Result<SplitRatios> {
        SplitRatios::new(self.train, self.val, self.test)
    }
}

/// Source-domain train/validation/test parts plus every target-domain frame.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub target: Dataset,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fewshot: FewShotProtocol,
    pub faithfulness: FaithfulnessConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.ratios()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.classes != self.synth.classes {
            return Err(Error::Config(format!(
                "model.classes = {} but synth.classes = {}",
                self.model.classes, self.synth.classes
            )));
        }
        if self.model.frame_length != self.synth.params.frame_length {
            return Err(Error::Config(format!(
                "model.frame_length = {} but synth.params.frame_length = {}",
                self.model.frame_length, self.synth.params.frame_length
            )));
        }
        let seeds = [
            self.synth.seed,
            self.synth.fleet_seed,
            self.split.seed,
            self.model.seed,
            self.model.backbone.seed,
            self.train.seed,
            self.fewshot.seed,
            self.faithfulness.seed,
        ];
        if seeds.iter().any(|&s| s > MAX_SEED) {
            return Err(Error::Config(format!("seeds must be at most {MAX_SEED}")));
        }
        Ok(())
    }

    pub fn splits(&self, dataset: &Dataset) -> Result<Splits> {
        let source = dataset.role_subset(DomainRole::Source);
        let (train, val, test) = split_dataset(&source, self.split.ratios()?, self.split.seed)?;
        Ok(Splits {
            train,
            val,
            test,
            target: dataset.role_subset(DomainRole::Target),
        })
    }

    /// Replaces every seed except the fleet seed, so device identities stay fixed.
    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        if seed > MAX_SEED {
            return Err(Error::Config(format!("seed must be at most {MAX_SEED}")));
        }
        self.synth.seed = seed;
        self.split.seed = seed;
        self.model.seed = seed;
        self.model.backbone.seed = seed;
        self.train.seed = seed;
        self.fewshot.seed = seed;
        self.faithfulness.seed = seed;
        Ok(self)
    }
}
