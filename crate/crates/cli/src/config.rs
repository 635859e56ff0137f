//! Run configuration file.
//!
//! TOML with every key optional; unknown keys are errors. Relative paths are
//! taken from the working directory. Full grammar with defaults:
//!
//! ```toml
//! seed = 0
//! out_dir = "out"
//! fields = ["diagnosis", "assessment"]
//!
//! [corpus]
//! path = "out/corpus.jsonl"        # default: <out_dir>/corpus.jsonl
//! terminology = "out/terminology"  # directory of the four TSV files
//! root = "404684003"
//! split = "out/split.jsonl"        # default: <out_dir>/split.jsonl
//!
//! [generator]                      # synthetic corpus
//! records = 2000
//! codes = 50
//! zipf_exponent = 1.2
//! mean_codes = 2.0
//! noise_rate = 0.1
//! assessment_mention_rate = 0.3
//! assessment_min_words = 12
//! assessment_max_words = 30
//!
//! [split]
//! fractions = [0.8, 0.1, 0.1]
//!
//! [tokenizer]
//! min_count = 1
//! max_size = 30000
//! max_len = 256
//!
//! [model]
//! dim = 128
//! blocks = 2
//! heads = 4
//! dropout = 0.25
//! backbone_frozen = false
//!
//! [train]
//! batch_size = 32
//! learning_rate = 3e-5
//! warmup_steps = 5000
//! max_epochs = 50
//! patience = 5
//! beta1 = 0.9
//! beta2 = 0.999
//! epsilon = 1e-8
//! weight_decay = 0.01
//! threshold = 0.5
//!
//! [analysis]
//! volume_fractions = [0.25, 0.5, 0.75, 1.0]
//! field_permutations = [["diagnosis"], ["assessment"], ["diagnosis", "assessment"]]
//!
//! [service]
//! host = "127.0.0.1"
//! port = 8080
//! threshold = 0.5
//! top_k = 20
//! log = "out/decisions.jsonl"      # default: <out_dir>/decisions.jsonl
//! ```
//!
//! `train.seed` is not accepted here; training seeds derive from `seed`.

use std::path::{Path, PathBuf};

use dxcode_core::corpus::{Section, SyntheticConfig};
use dxcode_core::pipeline::{ModelSettings, PipelineConfig};
use dxcode_core::splitter::Fractions;
use dxcode_core::terminology::CLINICAL_FINDING;
use dxcode_core::tokenizer::TokenizerConfig;
use dxcode_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    pub path: Option<PathBuf>,
    pub terminology: Option<PathBuf>,
    pub root: String,
    pub split: Option<PathBuf>,
}

impl Default for CorpusPaths {
    fn default() -> Self {
        CorpusPaths {
            path: None,
            terminology: None,
            root: CLINICAL_FINDING.into(),
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub fractions: Fractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub volume_fractions: Vec<f64>,
    pub field_permutations: Vec<Vec<Section>>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            volume_fractions: vec![0.25, 0.5, 0.75, 1.0],
            field_permutations: vec![
                vec![Section::Diagnosis],
                vec![Section::Assessment],
                vec![Section::Diagnosis, Section::Assessment],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub threshold: f64,
    pub top_k: usize,
    pub log: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            threshold: 0.5,
            top_k: 20,
            log: None,
        }
    }
}

/// Training settings without the seed, which the run derives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub threshold: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_steps: t.warmup_steps,
            max_epochs: t.max_epochs,
            patience: t.patience,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            weight_decay: t.weight_decay,
            threshold: t.threshold,
        }
    }
}

impl TrainSettings {
    fn resolve(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            max_epochs: self.max_epochs,
            patience: self.patience,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            threshold: self.threshold,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub fields: Vec<Section>,
    pub corpus: CorpusPaths,
    pub generator: SyntheticConfig,
    pub split: SplitSettings,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub analysis: AnalysisSettings,
    pub service: ServiceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            fields: PipelineConfig::default().fields,
            corpus: CorpusPaths::default(),
            generator: SyntheticConfig::default(),
            split: SplitSettings::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            analysis: AnalysisSettings::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            fields: self.fields.clone(),
            tokenizer: self.tokenizer.clone(),
            model: self.model.clone(),
            train: self.train.resolve(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        self.split.fractions.validate()?;
        self.pipeline().validate()?;
        Ok(())
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.corpus.path.clone().unwrap_or_else(|| self.out_dir.join("corpus.jsonl"))
    }

    pub fn terminology_dir(&self) -> PathBuf {
        self.corpus
            .terminology
            .clone()
            .unwrap_or_else(|| self.out_dir.join("terminology"))
    }

    pub fn split_path(&self) -> PathBuf {
        self.corpus.split.clone().unwrap_or_else(|| self.out_dir.join("split.jsonl"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.out_dir.join("vocab.tsv")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out_dir.join("model")
    }

    pub fn decision_log(&self) -> PathBuf {
        self.service.log.clone().unwrap_or_else(|| self.out_dir.join("decisions.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sede = 1").is_err());
        assert!(RunConfig::parse("[train]\nseed = 1").is_err());
        assert!(RunConfig::parse("[model]\nwidth = 3").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut config = RunConfig::parse("seed = 9\nfields = [\"diagnosis\"]\n[train]\nlearning_rate = 0.003").unwrap();
        config.corpus.path = Some("x.jsonl".into());
        assert_eq!(RunConfig::parse(&config.to_toml()).unwrap(), config);
        assert_eq!(config.pipeline().train.learning_rate, 0.003);
        assert_eq!(config.pipeline().fields, vec![Section::Diagnosis]);
    }

    #[test]
    fn paths_default_under_out_dir() {
        let config = RunConfig::parse("out_dir = \"o\"").unwrap();
        assert_eq!(config.corpus_path(), PathBuf::from("o/corpus.jsonl"));
        assert_eq!(config.split_path(), PathBuf::from("o/split.jsonl"));
    }
}
