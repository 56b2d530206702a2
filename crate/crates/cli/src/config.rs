//! Run configuration file. Every section is optional; relative paths are
//! taken relative to the file's directory.

use std::path::{Path, PathBuf};

use causalfuse::{LossConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub dictionary: DictionarySection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub corpus: PathBuf,
    pub split: String,
    pub street: f64,
    pub cloud: f64,
    pub bush: f64,
    pub n: usize,
    /// When set, generate this many pairs of every category instead of
    /// sampling from the profile.
    pub per_category: Option<usize>,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            corpus: "corpus".into(),
            split: "train".into(),
            street: 0.8,
            cloud: 0.1,
            bush: 0.1,
            n: 300,
            per_category: None,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionarySection {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub visible: PathBuf,
    pub infrared: PathBuf,
}

impl Default for DictionarySection {
    fn default() -> Self {
        DictionarySection {
            n: causalfuse::confounder::DEFAULT_SIZE,
            d: causalfuse::confounder::DEFAULT_DIM,
            seed: 0,
            visible: "z_vis.json".into(),
            infrared: "z_ir.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop: usize,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub loss: LossConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            crop: t.crop,
            seed: t.seed,
            run_dir: "run".into(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            crop: self.crop,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    pub report: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: "test".into(),
            report: "report.csv".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` and resolves its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.data.corpus,
            &mut self.dictionary.visible,
            &mut self.dictionary.infrared,
            &mut self.train.run_dir,
            &mut self.eval.report,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}
