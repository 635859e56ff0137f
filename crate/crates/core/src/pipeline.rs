//! One end-to-end run: vocabulary from the training inputs, model init,
//! training, test evaluation. Shared by the CLI and the analysis studies.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{build_input, Corpus, Section, Split};
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::model::{ModelConfig, ModelState};
use crate::splitter::SplitPlan;
use crate::tokenizer::{corpus_stats, CorpusStats, TokenizerConfig, Vocabulary};
use crate::trainer::{evaluate_dataset, train, Dataset, TrainConfig, TrainLog};

/// Module seed: the first eight bytes (little endian) of
/// `SHA-256(global_seed as 8 little-endian bytes || module name as UTF-8)`.
pub fn derive_seed(global: u64, module: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(module.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Model hyperparameters that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub backbone_frozen: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::new(1, 1, 1);
        ModelSettings {
            dim: c.dim,
            blocks: c.blocks,
            heads: c.heads,
            dropout: c.dropout,
            backbone_frozen: c.backbone_frozen,
        }
    }
}

impl ModelSettings {
    pub fn resolve(&self, vocab_size: usize, max_len: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dim: self.dim,
            blocks: self.blocks,
            heads: self.heads,
            max_len,
            classes,
            dropout: self.dropout,
            backbone_frozen: self.backbone_frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub fields: Vec<Section>,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSettings,
    /// `train.seed` is ignored; runs derive it from their global seed.
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fields: vec![Section::Diagnosis, Section::Assessment],
            tokenizer: TokenizerConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Config("fields must name at least one section".into()));
        }
        self.model.resolve(1, self.tokenizer.max_len, 1).validate()?;
        self.train.validate()
    }
}

pub struct RunOutcome {
    pub vocab: Vocabulary,
    pub state: ModelState,
    pub log: TrainLog,
    pub test: EvalReport,
    /// Token statistics of the chosen fields over the whole corpus.
    pub input_stats: CorpusStats,
}

/// Record ids of the train, validation and test splits, in corpus order.
pub fn split_ids<'a>(corpus: &'a Corpus, plan: &SplitPlan) -> [Vec<&'a str>; 3] {
    Split::ALL.map(|s| plan.ids_in(corpus, s))
}

pub fn texts(corpus: &Corpus, ids: &[&str], fields: &[Section]) -> Result<Vec<String>> {
    ids.iter()
        .map(|id| {
            let record = corpus.get(id).ok_or_else(|| Error::InvalidRecord {
                record_id: id.to_string(),
                message: "not in corpus".into(),
            })?;
            build_input(record, fields)
        })
        .collect()
}

/// Vocabulary over the configured input fields of `ids`.
pub fn build_vocab(corpus: &Corpus, ids: &[&str], config: &PipelineConfig) -> Result<Vocabulary> {
    Ok(Vocabulary::with_config(
        &texts(corpus, ids, &config.fields)?,
        &config.tokenizer,
    ))
}

/// Builds the vocabulary from the training inputs, trains from a fresh init
/// and evaluates on the test split.
pub fn run(
    corpus: &Corpus,
    plan: &SplitPlan,
    train_ids: Option<&[&str]>,
    config: &PipelineConfig,
    seed: u64,
) -> Result<RunOutcome> {
    run_with_vocab(corpus, plan, train_ids, None, config, seed)
}

/// As [`run`], reusing `vocab` when given instead of building one.
pub fn run_with_vocab(
    corpus: &Corpus,
    plan: &SplitPlan,
    train_ids: Option<&[&str]>,
    vocab: Option<Vocabulary>,
    config: &PipelineConfig,
    seed: u64,
) -> Result<RunOutcome> {
    config.validate()?;
    plan.check_covers(corpus)?;
    let [full_train, validation_ids, test_ids] = split_ids(corpus, plan);
    let train_ids: Vec<&str> = match train_ids {
        Some(ids) => ids.to_vec(),
        None => full_train,
    };
    let fields = &config.fields;
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(corpus, &train_ids, config)?,
    };

    let train_set = Dataset::from_records(corpus, &train_ids, &vocab, fields)?;
    let validation = Dataset::from_records(corpus, &validation_ids, &vocab, fields)?;
    let test = Dataset::from_records(corpus, &test_ids, &vocab, fields)?;

    let model_config = config
        .model
        .resolve(vocab.size(), vocab.max_len(), corpus.inventory().len());
    let state = ModelState::init(&model_config, derive_seed(seed, "model"))?;
    let train_config = TrainConfig {
        seed: derive_seed(seed, "trainer"),
        ..config.train.clone()
    };
    let (state, log) = train(state, &train_set, &validation, &train_config)?;
    let report = evaluate_dataset(&state, &test, corpus.inventory().codes(), train_config.threshold)?;
    let all_ids: Vec<&str> = corpus.records().iter().map(|r| r.record_id.as_str()).collect();
    let input_stats = corpus_stats(&vocab, &texts(corpus, &all_ids, fields)?);
    Ok(RunOutcome {
        vocab,
        state,
        log,
        test: report,
        input_stats,
    })
}
