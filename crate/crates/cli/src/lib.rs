//! `dxcode` command implementations. The binary only parses arguments and
//! reports errors; everything else lives here so tests can drive it.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! corpus.jsonl, terminology/*.tsv      gen-synthetic
//! split.jsonl                          split
//! vocab.tsv                            build-vocab
//! model/                               train: model.json, vocab.tsv, inventory.json,
//!                                      train_log.csv, train_summary.json,
//!                                      test_metrics.json, test_metrics_classes.csv
//! eval/                                evaluate: test_metrics.json, test_metrics_classes.csv
//! analysis/<study>.csv                 analyze, with <study>.provenance.json
//! decisions.jsonl                      serve
//! ```
//!
//! Each command also writes `<command>.config.toml`, the resolved
//! configuration, into its output directory.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dxcode_core::analysis::{
    category_study, config_hash, corpus_id, depth_study, field_study, frequency_study, frozen_comparison,
    volume_sweep, AnalysisTable, Provenance, Runner,
};
use dxcode_core::corpus::{generate_synthetic, load_corpus, synthetic_codebook, Corpus, Inventory, Split};
use dxcode_core::evaluation::EvalReport;
use dxcode_core::model::ModelState;
use dxcode_core::pipeline::{build_vocab, derive_seed, run_with_vocab, split_ids};
use dxcode_core::splitter::{stratified_split, SplitPlan};
use dxcode_core::terminology::{synthetic_terminology, ConceptGraph, TerminologyFiles};
use dxcode_core::tokenizer::Vocabulary;
use dxcode_core::trainer::{evaluate_dataset, Dataset};
use dxcode_service::{AppState, DecisionStore, ServiceError, ServiceSettings, Suggester};
use serde_json::json;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dxcode_core::Error),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Missing(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Service(e) => e.kind(),
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Missing(_) => "missing_input",
        }
    }

    /// One-line JSON for standard error.
    pub fn to_line(&self) -> String {
        json!({"error": {"kind": self.kind(), "message": self.to_string().replace('\n', " ")}}).to_string()
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dxcode", version, about = "Diagnosis-code classification pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed, overriding the file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its terminology.
    GenSynthetic {
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        codes: Option<usize>,
    },
    /// Build the vocabulary from the training split.
    BuildVocab,
    /// Stratified train/validation/test split.
    Split,
    /// Train on the training split and evaluate on the test split.
    Train(TrainArgs),
    /// Evaluate the trained model on the test split.
    Evaluate,
    /// Run one analysis study.
    Analyze {
        study: Study,
        /// Comma-separated fractions for the volume study.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Serve suggestions and record coder decisions over HTTP.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Train only the pooler and classifier.
    #[arg(long)]
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Frequency,
    Depth,
    Volume,
    Fields,
    Frozen,
    Categories,
}

impl Study {
    fn name(self) -> &'static str {
        match self {
            Study::Frequency => "frequency",
            Study::Depth => "depth",
            Study::Volume => "volume",
            Study::Fields => "fields",
            Study::Frozen => "frozen",
            Study::Categories => "categories",
        }
    }
}

impl TrainArgs {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(e) = self.max_epochs {
            config.train.max_epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            config.train.learning_rate = lr;
        }
        if self.frozen {
            config.model.backbone_frozen = true;
        }
    }
}

/// File values, then flag overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    match &cli.command {
        Command::GenSynthetic { records, codes } => {
            if let Some(r) = records {
                config.generator.records = *r;
            }
            if let Some(c) = codes {
                config.generator.codes = *c;
            }
        }
        Command::Train(args) => args.apply(&mut config),
        Command::Analyze { fractions, train, .. } => {
            train.apply(&mut config);
            if let Some(f) = fractions {
                config.analysis.volume_fractions = f.clone();
            }
        }
        Command::Serve {
            host,
            port,
            threshold,
            top_k,
        } => {
            if let Some(h) = host {
                config.service.host = h.clone();
            }
            if let Some(p) = port {
                config.service.port = *p;
            }
            if let Some(t) = threshold {
                config.service.threshold = *t;
            }
            if let Some(k) = top_k {
                config.service.top_k = *k;
            }
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::GenSynthetic { .. } => gen_synthetic(&config),
        Command::Split => split(&config),
        Command::BuildVocab => build_vocabulary(&config),
        Command::Train(_) => train(&config),
        Command::Evaluate => evaluate(&config),
        Command::Analyze { study, .. } => analyze(&config, *study),
        Command::Serve { .. } => serve(&config),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_resolved(config: &RunConfig, dir: &Path, command: &str) -> CliResult<()> {
    create_dir(dir)?;
    write_file(&dir.join(format!("{command}.config.toml")), config.to_toml())
}

fn require(path: &Path, hint: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{} not found; {hint}", path.display())))
    }
}

fn print_summary(value: serde_json::Value) {
    println!("{value}");
}

fn gen_synthetic(config: &RunConfig) -> CliResult<()> {
    let seed = derive_seed(config.seed, "generator");
    let corpus = generate_synthetic(&config.generator, seed)?;
    let book = synthetic_codebook(&config.generator, seed)?;
    let graph = synthetic_terminology(&book, seed)?;

    let corpus_path = config.corpus_path();
    if let Some(parent) = corpus_path.parent() {
        create_dir(parent)?;
    }
    corpus.save(&corpus_path)?;
    let term_dir = config.terminology_dir();
    create_dir(&term_dir)?;
    graph.save(&TerminologyFiles::in_dir(&term_dir))?;
    write_resolved(config, &config.out_dir, "gen-synthetic")?;
    print_summary(json!({
        "corpus": corpus_path,
        "records": corpus.len(),
        "codes": corpus.inventory().len(),
        "terminology": term_dir,
        "concepts": graph.len(),
    }));
    Ok(())
}

fn load_inputs(config: &RunConfig) -> CliResult<(Corpus, SplitPlan)> {
    let corpus_path = config.corpus_path();
    require(&corpus_path, "run gen-synthetic or set corpus.path")?;
    let corpus = load_corpus(&corpus_path)?;
    let split_path = config.split_path();
    require(&split_path, "run split first")?;
    let mut plan = SplitPlan::load(&split_path)?;
    plan.check_covers(&corpus)?;
    plan.seed = derive_seed(config.seed, "splitter");
    Ok((corpus, plan))
}

fn split(config: &RunConfig) -> CliResult<()> {
    let corpus_path = config.corpus_path();
    require(&corpus_path, "run gen-synthetic or set corpus.path")?;
    let corpus = load_corpus(&corpus_path)?;
    let plan = stratified_split(&corpus, config.split.fractions, derive_seed(config.seed, "splitter"))?;
    let path = config.split_path();
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    plan.save(&path)?;
    write_resolved(config, &config.out_dir, "split")?;
    let [train, validation, test] = plan.sizes();
    print_summary(json!({"split": path, "train": train, "validation": validation, "test": test}));
    Ok(())
}

fn build_vocabulary(config: &RunConfig) -> CliResult<()> {
    let (corpus, plan) = load_inputs(config)?;
    let [train_ids, _, _] = split_ids(&corpus, &plan);
    let vocab = build_vocab(&corpus, &train_ids, &config.pipeline())?;
    let path = config.vocab_path();
    create_dir(&config.out_dir)?;
    vocab.save(&path)?;
    write_resolved(config, &config.out_dir, "build-vocab")?;
    print_summary(json!({"vocab": path, "size": vocab.size(), "max_len": vocab.max_len()}));
    Ok(())
}

fn save_report(report: &EvalReport, dir: &Path, stem: &str) -> CliResult<()> {
    create_dir(dir)?;
    report.save(dir, stem)?;
    Ok(())
}

fn train(config: &RunConfig) -> CliResult<()> {
    let (corpus, plan) = load_inputs(config)?;
    let pipeline = config.pipeline();
    let vocab_path = config.vocab_path();
    let vocab = if vocab_path.exists() {
        Some(Vocabulary::load(&vocab_path)?)
    } else {
        tracing::info!("no vocabulary at {}; building one from the training split", vocab_path.display());
        None
    };
    let started = Instant::now();
    let outcome = run_with_vocab(&corpus, &plan, None, vocab, &pipeline, config.seed)?;
    let seconds = started.elapsed().as_secs_f64();

    let dir = config.model_dir();
    create_dir(&dir)?;
    outcome.state.save(&dir.join("model.json"))?;
    outcome.vocab.save(&dir.join("vocab.tsv"))?;
    let inventory_path = dir.join("inventory.json");
    write_file(
        &inventory_path,
        serde_json::to_string_pretty(corpus.inventory()).expect("inventory serializes") + "\n",
    )?;
    let log_path = dir.join("train_log.csv");
    let mut csv = Vec::new();
    outcome.log.write_csv(&mut csv).map_err(io_err(&log_path))?;
    write_file(&log_path, csv)?;
    save_report(&outcome.test, &dir, "test_metrics")?;

    let rounded = outcome.test.rounded();
    let summary = json!({
        "best_epoch": outcome.log.best_epoch,
        "best_val_f1": outcome.log.best_val_f1,
        "stop_reason": outcome.log.stop_reason,
        "steps": outcome.log.steps,
        "epochs": outcome.log.epochs.len(),
        "epoch_seconds": outcome.log.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>(),
        "total_seconds": seconds,
        "parameters": outcome.state.params.parameter_count(),
        "input_stats": {
            "mean_tokens": outcome.input_stats.mean_tokens,
            "truncation_rate": outcome.input_stats.truncation_rate,
            "unknown_rate": outcome.input_stats.unknown_rate,
        },
        "test": {"f1": rounded.f1, "precision": rounded.precision, "recall": rounded.recall, "exact_match": rounded.exact_match},
    });
    write_file(
        &dir.join("train_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    write_resolved(config, &dir, "train")?;
    print_summary(json!({
        "model": dir.join("model.json"),
        "f1": rounded.f1,
        "exact_match": rounded.exact_match,
        "epochs": outcome.log.epochs.len(),
        "seconds": seconds,
    }));
    Ok(())
}

struct Trained {
    state: ModelState,
    vocab: Vocabulary,
    inventory: Inventory,
}

fn load_trained(config: &RunConfig) -> CliResult<Trained> {
    let dir = config.model_dir();
    let model_path = dir.join("model.json");
    require(&model_path, "run train first")?;
    let state = ModelState::load(&model_path)?;
    let vocab = Vocabulary::load(&dir.join("vocab.tsv"))?;
    let inventory_path = dir.join("inventory.json");
    let text = fs::read_to_string(&inventory_path).map_err(io_err(&inventory_path))?;
    let inventory: Inventory = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", inventory_path.display())))?;
    Ok(Trained { state, vocab, inventory })
}

fn test_report(config: &RunConfig, corpus: &Corpus, plan: &SplitPlan) -> CliResult<EvalReport> {
    let trained = load_trained(config)?;
    if trained.inventory != *corpus.inventory() {
        return Err(CliError::Config(
            "the corpus code inventory differs from the one the model was trained on".into(),
        ));
    }
    let [_, _, test_ids] = split_ids(corpus, plan);
    let data = Dataset::from_records(corpus, &test_ids, &trained.vocab, &config.fields)?;
    Ok(evaluate_dataset(
        &trained.state,
        &data,
        corpus.inventory().codes(),
        config.train.threshold,
    )?)
}

fn evaluate(config: &RunConfig) -> CliResult<()> {
    let (corpus, plan) = load_inputs(config)?;
    let report = test_report(config, &corpus, &plan)?;
    let dir = config.out_dir.join("eval");
    save_report(&report, &dir, "test_metrics")?;
    write_resolved(config, &dir, "evaluate")?;
    let r = report.rounded();
    print_summary(json!({"metrics": dir.join("test_metrics.json"), "f1": r.f1, "exact_match": r.exact_match}));
    Ok(())
}

fn load_graph(config: &RunConfig) -> CliResult<ConceptGraph> {
    let dir = config.terminology_dir();
    let files = TerminologyFiles::in_dir(&dir);
    require(&files.concepts, "run gen-synthetic or set corpus.terminology")?;
    let files = TerminologyFiles {
        inactive_map: files.inactive_map.filter(|p| p.exists()),
        categories: files.categories.filter(|p| p.exists()),
        ..files
    };
    Ok(ConceptGraph::load(&files, &config.corpus.root)?)
}

fn provenance(config: &RunConfig, study: &str, corpus: &Corpus, plan: &SplitPlan) -> Provenance {
    let mut seeds = BTreeMap::new();
    seeds.insert("global".to_string(), config.seed);
    seeds.insert("model".to_string(), derive_seed(config.seed, "model"));
    seeds.insert("trainer".to_string(), derive_seed(config.seed, "trainer"));
    seeds.insert("split".to_string(), plan.seed);
    Provenance {
        study: study.into(),
        corpus_id: corpus_id(corpus),
        config_hash: config_hash(&config.pipeline()),
        seeds,
    }
}

fn analyze(config: &RunConfig, study: Study) -> CliResult<()> {
    let (corpus, plan) = load_inputs(config)?;
    let dir = config.out_dir.join("analysis");
    create_dir(&dir)?;
    let name = study.name();
    let pipeline = config.pipeline();
    let table: AnalysisTable = match study {
        Study::Frequency | Study::Depth | Study::Categories => {
            let test = test_report(config, &corpus, &plan)?;
            let mut table = match study {
                Study::Frequency => frequency_study(&corpus, &test)?,
                Study::Depth => depth_study(&load_graph(config)?, &test)?,
                _ => category_study(&load_graph(config)?, &test)?,
            };
            table.provenance = provenance(config, name, &corpus, &plan);
            table
        }
        Study::Volume => {
            let mut runner = Runner::new(&corpus, &plan, config.seed);
            volume_sweep(&mut runner, &pipeline, &config.analysis.volume_fractions, |partial| {
                partial.save(&dir, name)
            })?
        }
        Study::Fields => {
            let mut runner = Runner::new(&corpus, &plan, config.seed);
            field_study(&mut runner, &pipeline, &config.analysis.field_permutations)?
        }
        Study::Frozen => {
            let mut runner = Runner::new(&corpus, &plan, config.seed);
            frozen_comparison(&mut runner, &pipeline)?
        }
    };
    table.save(&dir, name)?;
    write_resolved(config, &dir, &format!("analyze-{name}"))?;
    print_summary(json!({
        "table": dir.join(format!("{name}.csv")),
        "rows": table.len(),
        "summary": table.summary,
    }));
    Ok(())
}

/// Records awaiting review: the test split when a split exists, otherwise
/// the whole corpus.
fn review_queue(config: &RunConfig, corpus: &Corpus) -> CliResult<Vec<dxcode_core::corpus::ClinicalRecord>> {
    let split_path = config.split_path();
    if !split_path.exists() {
        return Ok(corpus.records().to_vec());
    }
    let plan = SplitPlan::load(&split_path)?;
    plan.check_covers(corpus)?;
    Ok(corpus
        .records()
        .iter()
        .filter(|r| plan.get(&r.record_id) == Some(Split::Test))
        .cloned()
        .collect())
}

fn serve(config: &RunConfig) -> CliResult<()> {
    let corpus_path = config.corpus_path();
    require(&corpus_path, "run gen-synthetic or set corpus.path")?;
    let corpus = load_corpus(&corpus_path)?;
    let graph = load_graph(config).ok();
    if graph.is_none() {
        tracing::warn!("no terminology loaded; /search will be unavailable");
    }
    let suggester = if config.model_dir().join("model.json").exists() {
        let trained = load_trained(config)?;
        Some(Suggester::new(trained.state, trained.vocab, &trained.inventory, graph.as_ref())?)
    } else {
        tracing::warn!("no trained model; /suggest will be unavailable");
        None
    };
    let log_path = config.decision_log();
    if let Some(parent) = log_path.parent() {
        create_dir(parent)?;
    }
    let store = DecisionStore::open(&log_path, review_queue(config, &corpus)?, corpus.inventory().clone())?;
    let settings = ServiceSettings {
        threshold: config.service.threshold,
        top_k: config.service.top_k,
        fields: config.fields.clone(),
    };
    write_resolved(config, &config.out_dir, "serve")?;
    let state = AppState::new(suggester, graph, store, settings);
    let address = format!("{}:{}", config.service.host, config.service.port);

    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&address)
            .await
            .map_err(|e| CliError::Io(format!("bind {address}: {e}")))?;
        tracing::info!("listening on {address}");
        dxcode_service::serve(listener, state)
            .await
            .map_err(|e| CliError::Io(e.to_string()))
    })
}
