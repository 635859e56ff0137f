//! Performance analyses over trained runs: class F1 against code frequency
//! and hierarchy depth, training-volume and input-field sweeps, frozen versus
//! fine-tuned backbones, and disease-category aggregation.
//!
//! Every study returns an [`AnalysisTable`] written as `<stem>.csv` plus a
//! `<stem>.provenance.json` sidecar. Plot layouts:
//!
//! | study       | x column         | y column(s)                     |
//! |-------------|------------------|---------------------------------|
//! | frequency   | `ln_frequency`   | `f1` (one point per code)       |
//! | depth       | `depth`          | `mean_f1` +- `ci_half_width`    |
//! | volume      | `fraction`       | `f1`, `precision`, `recall`, `exact_match` |
//! | fields      | `fields`         | metrics, `mean_tokens`, `truncation_rate` |
//! | frozen      | `mode`           | metrics                         |
//! | categories  | `category`       | `f1`, `precision`, `recall`, `support` |

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Section};
use crate::error::{Error, Result};
use crate::evaluation::{confidence_interval, weighted, ClassReport, EvalReport};
use crate::pipeline::{derive_seed, run, PipelineConfig, RunOutcome};
use crate::splitter::{subset_training, SplitPlan};
use crate::terminology::{Category, ConceptGraph};
use crate::tokenizer::CorpusStats;
use crate::trainer::TrainLog;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
    Missing,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Num)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(s) if s.contains([',', '"', '\n']) => write!(f, "\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => f.write_str(s),
            Cell::Missing => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub study: String,
    pub corpus_id: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisTable {
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
    pub provenance: Provenance,
    /// Scalar results such as correlations; `None` means undefined.
    pub summary: BTreeMap<String, Option<f64>>,
}

impl AnalysisTable {
    pub fn new<S: AsRef<str>>(columns: &[S]) -> Result<Self> {
        let columns: Vec<String> = columns.iter().map(|c| c.as_ref().to_string()).collect();
        let unique: BTreeSet<&String> = columns.iter().collect();
        if unique.len() != columns.len() {
            return Err(Error::Config(format!("duplicate column in {columns:?}")));
        }
        Ok(AnalysisTable {
            columns,
            rows: Vec::new(),
            provenance: Provenance::default(),
            summary: BTreeMap::new(),
        })
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Shape(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }

    /// Numeric column values; non-numeric cells become `None`.
    pub fn numbers(&self, name: &str) -> Option<Vec<Option<f64>>> {
        Some(
            self.column(name)?
                .into_iter()
                .map(|c| match c {
                    Cell::Num(v) => Some(*v),
                    _ => None,
                })
                .collect(),
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::to_string).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_provenance<W: Write>(&self, w: W) -> std::io::Result<()> {
        let doc = serde_json::json!({
            "provenance": self.provenance,
            "columns": self.columns,
            "rows": self.rows.len(),
            "summary": self.summary,
        });
        serde_json::to_writer_pretty(w, &doc).map_err(std::io::Error::from)
    }

    /// Writes `<stem>.csv` and `<stem>.provenance.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        let mut w = BufWriter::new(fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?);
        self.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.provenance.json"));
        let mut w = BufWriter::new(fs::File::create(&json).map_err(|e| Error::io(&json, e))?);
        self.write_provenance(&mut w)
            .and_then(|_| writeln!(w))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&json, e))
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the corpus in its JSONL export form.
pub fn corpus_id(corpus: &Corpus) -> String {
    let mut buf = Vec::new();
    corpus.write_jsonl(&mut buf).expect("writing to memory");
    hex_prefix(&Sha256::digest(&buf))
}

/// Digest of any serializable configuration (its JSON form).
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex_prefix(&Sha256::digest(&json))
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn supported(report: &EvalReport) -> impl Iterator<Item = &ClassReport> {
    report.per_class.iter().filter(|c| c.support > 0)
}

/// Class F1 against the natural log of each code's frequency in the full
/// labeled corpus, for classes present in the evaluated targets.
pub fn frequency_study(corpus: &Corpus, report: &EvalReport) -> Result<AnalysisTable> {
    let freq = corpus.code_frequencies();
    let mut table = AnalysisTable::new(&["code", "frequency", "ln_frequency", "support", "f1"])?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for c in supported(report) {
        let i = corpus
            .inventory()
            .index_of(&c.code)
            .ok_or_else(|| Error::UnknownCode(c.code.clone()))?;
        let ln = (freq[i] as f64).ln();
        xs.push(ln);
        ys.push(c.f1);
        table.push(vec![c.code.as_str().into(), freq[i].into(), ln.into(), c.support.into(), c.f1.into()])?;
    }
    table.summary.insert("pearson_r".into(), pearson(&xs, &ys));
    table.provenance.study = "frequency".into();
    table.provenance.corpus_id = corpus_id(corpus);
    Ok(table)
}

/// Mean class F1 per hierarchy depth with 95% intervals across the codes at
/// each depth. Codes missing from the graph or unreachable from its root are
/// excluded and counted.
pub fn depth_study(graph: &ConceptGraph, report: &EvalReport) -> Result<AnalysisTable> {
    let mut by_depth: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut excluded = 0usize;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for c in supported(report) {
        match graph.depth(&c.code) {
            Ok(Some(d)) => {
                by_depth.entry(d).or_default().push(c.f1);
                xs.push(d as f64);
                ys.push(c.f1);
            }
            Ok(None) | Err(Error::UnknownCode(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    let mut table = AnalysisTable::new(&["depth", "codes", "mean_f1", "ci_half_width"])?;
    let mut represented = 0usize;
    for (depth, f1s) in &by_depth {
        represented += f1s.len();
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        let half = confidence_interval(f1s, 0.95).ok().map(|ci| ci.half_width);
        table.push(vec![(*depth).into(), f1s.len().into(), mean.into(), half.into()])?;
    }
    table.summary.insert("excluded_codes".into(), Some(excluded as f64));
    table.summary.insert("represented_codes".into(), Some(represented as f64));
    table.summary.insert("pearson_r".into(), pearson(&xs, &ys));
    table.provenance.study = "depth".into();
    Ok(table)
}

/// Support-weighted metrics per disease category, in category priority
/// order. Codes outside the terminology count as `Other`; categories with no
/// supported class are omitted.
pub fn category_study(graph: &ConceptGraph, report: &EvalReport) -> Result<AnalysisTable> {
    let mut members: BTreeMap<Category, Vec<ClassReport>> = BTreeMap::new();
    for c in supported(report) {
        let category = match graph.categorize(&c.code) {
            Ok(cat) => cat,
            Err(Error::UnknownCode(_)) => Category::Other,
            Err(e) => return Err(e),
        };
        members.entry(category).or_default().push(c.clone());
    }
    let mut table = AnalysisTable::new(&["category", "classes", "support", "precision", "recall", "f1"])?;
    for (category, classes) in &members {
        let support: usize = classes.iter().map(|c| c.support).sum();
        let (p, r, f1) = weighted(classes);
        table.push(vec![
            category.name().into(),
            classes.len().into(),
            support.into(),
            p.into(),
            r.into(),
            f1.into(),
        ])?;
    }
    table.provenance.study = "categories".into();
    Ok(table)
}

/// What a study keeps from one training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub test: EvalReport,
    pub input_stats: CorpusStats,
    pub log: TrainLog,
    pub train_records: usize,
}

/// Trains pipelines over one corpus and split with one global seed, reusing
/// the result when the same (config, training ids) pair is requested again.
pub struct Runner<'a> {
    corpus: &'a Corpus,
    plan: &'a SplitPlan,
    seed: u64,
    cache: HashMap<String, Rc<RunSummary>>,
}

impl<'a> Runner<'a> {
    pub fn new(corpus: &'a Corpus, plan: &'a SplitPlan, seed: u64) -> Self {
        Runner {
            corpus,
            plan,
            seed,
            cache: HashMap::new(),
        }
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Runs (or recalls) a pipeline. `train_ids = None` means the full
    /// training split.
    pub fn run(&mut self, config: &PipelineConfig, train_ids: Option<&[&str]>) -> Result<Rc<RunSummary>> {
        let full: Vec<&str>;
        let ids = match train_ids {
            Some(ids) => ids,
            None => {
                full = self.plan.ids_in(self.corpus, crate::corpus::Split::Train);
                &full
            }
        };
        let key = format!("{}:{}", config_hash(config), config_hash(&ids));
        if let Some(hit) = self.cache.get(&key) {
            return Ok(Rc::clone(hit));
        }
        let outcome = run(self.corpus, self.plan, Some(ids), config, self.seed)?;
        Ok(self.remember_key(key, &outcome, ids.len()))
    }

    /// Caches a full-training-split run made elsewhere with this runner's
    /// corpus, plan and seed, so studies reuse it instead of retraining.
    pub fn remember(&mut self, config: &PipelineConfig, outcome: &RunOutcome) -> Rc<RunSummary> {
        let ids = self.plan.ids_in(self.corpus, crate::corpus::Split::Train);
        let key = format!("{}:{}", config_hash(config), config_hash(&ids));
        self.remember_key(key, outcome, ids.len())
    }

    fn remember_key(&mut self, key: String, outcome: &RunOutcome, train_records: usize) -> Rc<RunSummary> {
        let summary = Rc::new(RunSummary {
            test: outcome.test.clone(),
            input_stats: outcome.input_stats.clone(),
            log: outcome.log.clone(),
            train_records,
        });
        self.cache.insert(key, Rc::clone(&summary));
        summary
    }

    fn provenance(&self, study: &str, config: &PipelineConfig) -> Provenance {
        let mut seeds = BTreeMap::new();
        seeds.insert("global".to_string(), self.seed);
        seeds.insert("model".to_string(), derive_seed(self.seed, "model"));
        seeds.insert("trainer".to_string(), derive_seed(self.seed, "trainer"));
        seeds.insert("split".to_string(), self.plan.seed);
        Provenance {
            study: study.into(),
            corpus_id: corpus_id(self.corpus),
            config_hash: config_hash(config),
            seeds,
        }
    }
}

fn metric_cells(report: &EvalReport) -> Vec<Cell> {
    vec![
        report.f1.into(),
        report.precision.into(),
        report.recall.into(),
        report.exact_match.into(),
    ]
}

/// Retrains from scratch on stratified subsets of the training split and
/// evaluates each on the same test split. `on_row` sees the table after every
/// row so a failure later in the sweep still leaves the finished rows.
pub fn volume_sweep(
    runner: &mut Runner<'_>,
    config: &PipelineConfig,
    fractions: &[f64],
    mut on_row: impl FnMut(&AnalysisTable) -> Result<()>,
) -> Result<AnalysisTable> {
    if !fractions.contains(&1.0) {
        return Err(Error::Config("volume fractions must include 1.0".into()));
    }
    let mut table = AnalysisTable::new(&["fraction", "train_records", "f1", "precision", "recall", "exact_match"])?;
    table.provenance = runner.provenance("volume", config);
    let subset_seed = derive_seed(runner.seed, "subset");
    table.provenance.seeds.insert("subset".into(), subset_seed);
    for &fraction in fractions {
        let ids = subset_training(runner.corpus, runner.plan, fraction, subset_seed)?;
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let summary = runner.run(config, Some(&refs))?;
        let mut row = vec![fraction.into(), summary.train_records.into()];
        row.extend(metric_cells(&summary.test));
        table.push(row)?;
        on_row(&table)?;
    }
    Ok(table)
}

fn field_label(fields: &[Section]) -> String {
    fields.iter().map(|f| f.as_str()).collect::<Vec<_>>().join("+")
}

/// One trained run per input-field list.
pub fn field_study(
    runner: &mut Runner<'_>,
    config: &PipelineConfig,
    permutations: &[Vec<Section>],
) -> Result<AnalysisTable> {
    let mut table = AnalysisTable::new(&[
        "fields",
        "f1",
        "precision",
        "recall",
        "exact_match",
        "mean_tokens",
        "truncation_rate",
    ])?;
    table.provenance = runner.provenance("fields", config);
    for fields in permutations {
        let cfg = PipelineConfig {
            fields: fields.clone(),
            ..config.clone()
        };
        let summary = runner.run(&cfg, None)?;
        let mut row = vec![field_label(fields).into()];
        row.extend(metric_cells(&summary.test));
        row.push(summary.input_stats.mean_tokens.into());
        row.push(summary.input_stats.truncation_rate.into());
        table.push(row)?;
    }
    Ok(table)
}

/// Paired fine-tuned and frozen-backbone runs with identical seeds and split.
pub fn frozen_comparison(runner: &mut Runner<'_>, config: &PipelineConfig) -> Result<AnalysisTable> {
    let mut table = AnalysisTable::new(&["mode", "f1", "precision", "recall", "exact_match"])?;
    table.provenance = runner.provenance("frozen", config);
    for (mode, frozen) in [("fine_tuned", false), ("frozen", true)] {
        let mut cfg = config.clone();
        cfg.model.backbone_frozen = frozen;
        let summary = runner.run(&cfg, None)?;
        let mut row = vec![mode.into()];
        row.extend(metric_cells(&summary.test));
        table.push(row)?;
    }
    Ok(table)
}
