//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass substrings as arguments to run a subset:
//!
//! ```text
//! cargo test --test acceptance -- replay determinism
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dxcode_core::analysis::{field_study, frequency_study, frozen_comparison, volume_sweep, Cell, Runner};
use dxcode_core::corpus::{
    build_input, clean_text, generate_synthetic, synthetic_codebook, ClinicalRecord, Corpus, Inventory, Section,
    SyntheticConfig,
};
use dxcode_core::evaluation::{confidence_interval, evaluate_indices};
use dxcode_core::model::{predict, Batch, ModelConfig, ModelState, Partition};
use dxcode_core::pipeline::{build_vocab, derive_seed, run, split_ids, ModelSettings, PipelineConfig};
use dxcode_core::splitter::{stratified_split, Fractions};
use dxcode_core::terminology::{Concept, ConceptGraph};
use dxcode_core::tokenizer::{Encoded, TokenizedExample, TokenizerConfig, START_ID};
use dxcode_core::trainer::{evaluate_dataset, lr_at, partition_unchanged, train, Dataset, TrainConfig};
use dxcode_service::{Action, DecisionRequest, DecisionStore, RecordRange, Suggester};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion {
            name: "metric-oracle",
            budget: Duration::from_secs(10),
            check: metric_oracle,
        },
        Criterion {
            name: "confidence-interval",
            budget: Duration::from_secs(1),
            check: ci_formula,
        },
        Criterion {
            name: "gradient-check",
            budget: Duration::from_secs(60),
            check: gradient_check,
        },
        Criterion {
            name: "lr-schedule",
            budget: Duration::from_secs(1),
            check: lr_schedule,
        },
        Criterion {
            name: "threshold-strict",
            budget: Duration::from_secs(1),
            check: threshold_semantics,
        },
        Criterion {
            name: "split-stratification",
            budget: Duration::from_secs(60),
            check: split_stratification,
        },
        Criterion {
            name: "depth-oracle",
            budget: Duration::from_secs(60),
            check: depth_oracle,
        },
        Criterion {
            name: "frozen-backbone",
            budget: Duration::from_secs(60),
            check: frozen_mode,
        },
        Criterion {
            name: "overfit-sanity",
            budget: Duration::from_secs(600),
            check: overfit,
        },
        Criterion {
            name: "generalization-trends",
            budget: Duration::from_secs(45 * 60),
            check: generalization,
        },
        Criterion {
            name: "event-log-replay",
            budget: Duration::from_secs(120),
            check: replay,
        },
        Criterion {
            name: "cli-determinism",
            budget: Duration::from_secs(300),
            check: cli_determinism,
        },
    ];

    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.check))
            .unwrap_or_else(|p| Err(format!("panic: {}", panic_text(&p))))
            .and_then(|detail| {
                let took = started.elapsed();
                if took > c.budget {
                    Err(format!("{detail}; took {:.1}s, budget {}s", took.as_secs_f64(), c.budget.as_secs()))
                } else {
                    Ok(detail)
                }
            });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:<24} {secs:>8.2}s  {detail}", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {:<24} {secs:>8.2}s  {why}", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "non-string panic".into())
}

// Metrics

/// Weighted P/R/F1 and EM from confusion counts over every (record, class).
fn brute_force_metrics(t: &[BTreeSet<usize>], p: &[BTreeSet<usize>], classes: usize) -> [f64; 4] {
    let mut sums = [0.0; 3];
    let mut total = 0.0;
    for c in 0..classes {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (ts, ps) in t.iter().zip(p) {
            match (ts.contains(&c), ps.contains(&c)) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        let n = tp + fn_;
        if n == 0.0 {
            continue;
        }
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = tp / n;
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        sums[0] += n * prec;
        sums[1] += n * rec;
        sums[2] += n * f1;
        total += n;
    }
    let w = |x: f64| if total > 0.0 { 100.0 * x / total } else { 0.0 };
    let em = t.iter().zip(p).filter(|(a, b)| a == b).count() as f64 * 100.0 / t.len() as f64;
    [w(sums[0]), w(sums[1]), w(sums[2]), em]
}

fn metric_oracle() -> Outcome {
    let codes: Vec<String> = (0..5).map(|c| format!("{}", 100 + c)).collect();
    let set = |xs: &[usize]| xs.iter().copied().collect::<BTreeSet<usize>>();
    let t = vec![set(&[0, 1]), set(&[1])];
    let p = vec![set(&[0]), set(&[1, 2])];
    let r = evaluate_indices(&t, &p, &codes[..3]).map_err(|e| e.to_string())?.rounded();
    ensure!(
        (r.precision, r.recall, r.f1, r.exact_match) == (100.0, 66.67, 77.78, 0.0),
        "worked example gave P {} R {} F1 {} EM {}",
        r.precision,
        r.recall,
        r.f1,
        r.exact_match
    );

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let records = rng.random_range(1..=8);
        let classes = rng.random_range(1..=5);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<BTreeSet<usize>> {
            (0..records)
                .map(|_| (0..classes).filter(|_| rng.random_bool(0.4)).collect())
                .collect()
        };
        let t = draw(&mut rng);
        let p = draw(&mut rng);
        let got = evaluate_indices(&t, &p, &codes[..classes]).map_err(|e| e.to_string())?;
        let want = brute_force_metrics(&t, &p, classes);
        for (a, b) in [got.precision, got.recall, got.f1, got.exact_match].iter().zip(want) {
            let err = (a - b).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-12, "case {case}: {a} vs oracle {b}");
        }
    }
    Ok(format!("worked example exact; 1000 random cases, max abs error {worst:e}"))
}

fn ci_formula() -> Outcome {
    let ci = confidence_interval(&[70.0, 72.0, 74.0], 0.95).map_err(|e| e.to_string())?;
    ensure!(
        (ci.mean - 72.0).abs() < 1e-3 && (ci.half_width - 4.968).abs() < 1e-3,
        "got {} ± {}",
        ci.mean,
        ci.half_width
    );
    let flat = confidence_interval(&[61.3, 61.3, 61.3], 0.95).map_err(|e| e.to_string())?;
    ensure!(flat.half_width == 0.0, "constant runs gave ± {}", flat.half_width);
    Ok(format!("72 ± {:.4}; constant runs ± 0", ci.half_width))
}

// Model and training

fn gradient_check() -> Outcome {
    const STEP: f64 = 1e-5;
    // Entries whose gradient is below this are compared against it, bounding
    // their absolute error by 1e-10 (the difference quotient's rounding
    // noise is ~1e-11).
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let config = ModelConfig {
        dim: 8,
        blocks: 1,
        heads: 2,
        ..ModelConfig::new(20, 12, 3)
    };
    let mut state = ModelState::init(&config, 4).map_err(|e| e.to_string())?;
    for t in state.params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let seqs: Vec<Vec<u32>> = (0..4)
        .map(|_| {
            let n = rng.random_range(1..11);
            std::iter::once(START_ID)
                .chain((0..n).map(|_| rng.random_range(1..20)))
                .collect()
        })
        .collect();
    let batch = Batch::from_sequences(&seqs);
    let targets = ndarray::Array2::from_shape_fn((4, 3), |_| f64::from(u8::from(rng.random_bool(0.5))));
    let loss = |s: &ModelState| s.backward(&batch, targets.view(), true, 17).unwrap().0;
    let (_, grads) = state.backward(&batch, targets.view(), true, 17).map_err(|e| e.to_string())?;

    let mut checked = 0;
    let mut worst = 0.0f64;
    for entry in grads.entries() {
        for (i, &analytic) in entry.data.iter().enumerate() {
            let nudge = |delta: f64| {
                let mut s = state.clone();
                let t = s.params.tensors_mut().into_iter().find(|t| t.name == entry.name).unwrap();
                t.data[i] += delta;
                loss(&s)
            };
            let numeric = (nudge(STEP) - nudge(-STEP)) / (2.0 * STEP);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            ensure!(err < 1e-4, "{}[{i}] analytic {analytic:e} numeric {numeric:e}", entry.name);
            checked += 1;
        }
    }
    ensure!(checked == state.params.parameter_count(), "checked {checked} entries only");
    Ok(format!("{checked} parameters, worst relative error {worst:.2e}"))
}

fn lr_schedule() -> Outcome {
    let cfg = TrainConfig {
        learning_rate: 3e-5,
        warmup_steps: 5000,
        ..Default::default()
    };
    let got: Vec<f64> = [0, 2500, 5000, 1_000_000].iter().map(|&s| lr_at(&cfg, s)).collect();
    ensure!(got == [0.0, 1.5e-5, 3e-5, 3e-5], "got {got:?}");
    Ok(format!("{got:?}"))
}

fn threshold_semantics() -> Outcome {
    let (probs, predicted) = predict(&[0.0, 1e-12, -1e-12], 0.5);
    ensure!(probs[0] == 0.5, "sigmoid(0) = {}", probs[0]);
    ensure!(predicted == BTreeSet::from([1]), "predicted {predicted:?}");
    Ok("logit 0 not predicted at threshold 0.5".into())
}

fn split_stratification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let fractions = Fractions::default();
    let mut checked = 0;
    for case in 0..300 {
        let n = rng.random_range(1..=200);
        let labels = rng.random_range(1..=20);
        let records: Vec<ClinicalRecord> = (0..n)
            .map(|i| {
                let codes: Vec<String> = (0..rng.random_range(0..=3))
                    .map(|_| rng.random_range(0..labels).to_string())
                    .collect();
                ClinicalRecord::new(format!("r{i}")).with_codes(codes)
            })
            .collect();
        let corpus = Corpus::new(records).map_err(|e| e.to_string())?;
        let plan = stratified_split(&corpus, fractions, case).map_err(|e| e.to_string())?;
        let again = stratified_split(&corpus, fractions, case).map_err(|e| e.to_string())?;
        ensure!(plan.assignment == again.assignment, "case {case}: same seed gave a different plan");
        let mut seen = 0;
        let mut counts: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
        for r in corpus.records() {
            let Some(split) = plan.get(&r.record_id) else {
                return Err(format!("case {case}: {} unassigned", r.record_id));
            };
            seen += 1;
            for c in &r.codes {
                counts.entry(c.as_str()).or_default()[split as usize] += 1;
            }
        }
        ensure!(
            seen == corpus.len() && plan.assignment.len() == corpus.len(),
            "case {case}: not a partition"
        );
        for (code, per) in counts {
            let support: usize = per.iter().sum();
            if support < 10 {
                continue;
            }
            for s in 0..3 {
                let dev = (per[s] as f64 - fractions.0[s] * support as f64).abs();
                ensure!(dev <= 1.0 + 1e-9, "case {case} label {code} split {s}: {per:?}");
            }
            checked += 1;
        }
    }
    Ok(format!("300 corpora, {checked} labels with support >= 10 within ±1"))
}

fn graph_from(nodes: usize, edges: &[(usize, usize)]) -> Result<ConceptGraph, String> {
    let concepts = (0..nodes)
        .map(|i| {
            (
                (1000 + i).to_string(),
                Concept {
                    term: format!("concept {i}"),
                    active: true,
                },
            )
        })
        .collect();
    let edges = edges.iter().map(|&(c, p)| ((1000 + c).to_string(), (1000 + p).to_string()));
    ConceptGraph::new(concepts, edges, "1000", BTreeMap::new(), BTreeMap::new()).map_err(|e| e.to_string())
}

/// Distances from node 0 walking parent -> child edges.
fn reverse_bfs(nodes: usize, edges: &[(usize, usize)]) -> Vec<Option<usize>> {
    let mut children = vec![Vec::new(); nodes];
    for &(c, p) in edges {
        children[p].push(c);
    }
    let mut dist = vec![None; nodes];
    dist[0] = Some(0);
    let mut queue = VecDeque::from([0]);
    while let Some(u) = queue.pop_front() {
        for &v in &children[u] {
            if dist[v].is_none() {
                dist[v] = Some(dist[u].unwrap() + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

fn depth_oracle() -> Outcome {
    let fixtures: [(&str, usize, Vec<(usize, usize)>, usize, usize); 2] = [
        ("chain root<-A<-B", 3, vec![(1, 0), (2, 1)], 2, 2),
        ("diamond root<-A<-C, root<-C", 3, vec![(1, 0), (2, 1), (2, 0)], 2, 1),
    ];
    for (name, n, edges, node, want) in fixtures {
        let g = graph_from(n, &edges)?;
        let got = g.depth(&(1000 + node).to_string()).map_err(|e| e.to_string())?;
        ensure!(got == Some(want), "{name}: depth {got:?}, expected {want}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut unreachable = 0;
    for case in 0..100 {
        let n = rng.random_range(2..=1000);
        let mut edges = Vec::new();
        for child in 1..n {
            // Occasional orphans leave parts of the graph unreachable.
            let k = if rng.random_bool(0.03) { 0 } else { rng.random_range(1..=3) };
            let parents: BTreeSet<usize> = (0..k).map(|_| rng.random_range(0..child)).collect();
            edges.extend(parents.into_iter().map(|p| (child, p)));
        }
        let g = graph_from(n, &edges)?;
        let want = reverse_bfs(n, &edges);
        for (i, w) in want.iter().enumerate() {
            let got = g.depth(&(1000 + i).to_string()).map_err(|e| e.to_string())?;
            ensure!(got == *w, "case {case} node {i}: depth {got:?}, BFS {w:?}");
            unreachable += usize::from(w.is_none());
        }
    }
    Ok(format!("fixtures exact; 100 random DAGs match BFS ({unreachable} unreachable nodes)"))
}

fn toy_dataset(n: usize, seed: u64, classes: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Dataset::default();
    for _ in 0..n {
        let labels: BTreeSet<usize> = (0..classes).filter(|_| rng.random_bool(0.4)).collect();
        let mut ids = vec![START_ID];
        ids.extend(labels.iter().map(|&c| 10 + c as u32));
        ids.extend((0..rng.random_range(1..5)).map(|_| rng.random_range(20..40)));
        let encoded = Encoded {
            ids,
            truncated: false,
            token_count: 0,
            unknown_count: 0,
        };
        data.examples.push(TokenizedExample::new(encoded, &labels, classes));
        data.labels.push(labels);
    }
    data
}

fn frozen_mode() -> Outcome {
    let config = ModelConfig {
        dim: 16,
        blocks: 1,
        heads: 2,
        backbone_frozen: true,
        ..ModelConfig::new(40, 12, 4)
    };
    let initial = ModelState::init(&config, 8).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        batch_size: 5,
        learning_rate: 1e-2,
        warmup_steps: 10,
        max_epochs: 10,
        patience: 10,
        ..Default::default()
    };
    let (trained, log) = train(initial.clone(), &toy_dataset(50, 1, 4), &toy_dataset(20, 2, 4), &cfg)
        .map_err(|e| e.to_string())?;
    ensure!(log.steps == 100, "ran {} steps", log.steps);
    ensure!(
        partition_unchanged(&initial, &trained, Partition::Backbone),
        "backbone changed"
    );
    ensure!(
        !partition_unchanged(&initial, &trained, Partition::Head),
        "head did not change"
    );
    Ok("100 steps: backbone bitwise equal, head updated".into())
}

fn desk_pipeline(fields: Vec<Section>, max_epochs: usize, patience: usize) -> PipelineConfig {
    PipelineConfig {
        fields,
        tokenizer: TokenizerConfig {
            max_len: 64,
            ..Default::default()
        },
        model: ModelSettings {
            dim: 64,
            blocks: 2,
            heads: 4,
            dropout: 0.25,
            backbone_frozen: false,
        },
        train: TrainConfig {
            learning_rate: 3e-3,
            warmup_steps: 100,
            max_epochs,
            patience,
            ..Default::default()
        },
    }
}

/// Memorization check: the training split doubles as the selection set, so
/// the returned checkpoint is the one that fits the training data best.
fn overfit() -> Outcome {
    let seed = 11;
    let generator = SyntheticConfig {
        records: 200,
        codes: 20,
        ..Default::default()
    };
    let corpus = generate_synthetic(&generator, derive_seed(seed, "generator")).map_err(|e| e.to_string())?;
    let plan =
        stratified_split(&corpus, Fractions::default(), derive_seed(seed, "splitter")).map_err(|e| e.to_string())?;
    let config = desk_pipeline(vec![Section::Diagnosis, Section::Assessment], 50, 50);
    let [train_ids, _, _] = split_ids(&corpus, &plan);
    let vocab = build_vocab(&corpus, &train_ids, &config).map_err(|e| e.to_string())?;
    let data = Dataset::from_records(&corpus, &train_ids, &vocab, &config.fields).map_err(|e| e.to_string())?;
    let model = config
        .model
        .resolve(vocab.size(), vocab.max_len(), corpus.inventory().len());
    let state = ModelState::init(&model, derive_seed(seed, "model")).map_err(|e| e.to_string())?;
    let train_config = TrainConfig {
        seed: derive_seed(seed, "trainer"),
        ..config.train.clone()
    };
    let (state, log) = train(state, &data, &data, &train_config).map_err(|e| e.to_string())?;
    let report = evaluate_dataset(&state, &data, corpus.inventory().codes(), 0.5).map_err(|e| e.to_string())?;
    let epochs = log.epochs.len();
    ensure!(epochs <= 50, "{epochs} epochs");
    ensure!(
        report.exact_match >= 95.0,
        "train EM {:.2}% after {epochs} epochs",
        report.exact_match
    );
    Ok(format!(
        "train EM {:.2}% (F1 {:.2}) over {} records in {epochs} epochs",
        report.exact_match,
        report.f1,
        data.len()
    ))
}

fn number(cell: &Cell) -> f64 {
    match cell {
        Cell::Num(x) => *x,
        _ => f64::NAN,
    }
}

fn generalization() -> Outcome {
    let seed = 42;
    let generator = SyntheticConfig {
        records: 2000,
        codes: 50,
        zipf_exponent: 1.2,
        ..Default::default()
    };
    let gen_seed = derive_seed(seed, "generator");
    let corpus = generate_synthetic(&generator, gen_seed).map_err(|e| e.to_string())?;
    let plan =
        stratified_split(&corpus, Fractions::default(), derive_seed(seed, "splitter")).map_err(|e| e.to_string())?;
    let config = desk_pipeline(vec![Section::Diagnosis, Section::Assessment], 30, 5);
    let err = |e: dxcode_core::Error| e.to_string();
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    let started = Instant::now();
    let full = run(&corpus, &plan, None, &config, seed).map_err(err)?;
    let f1 = full.test.f1;
    notes.push(format!(
        "test F1 {f1:.2} EM {:.2} ({} epochs, {:.0}s)",
        full.test.exact_match,
        full.log.epochs.len(),
        started.elapsed().as_secs_f64()
    ));
    if f1 < 70.0 {
        failures.push(format!("test F1 {f1:.2} < 70"));
    }

    let freq = frequency_study(&corpus, &full.test).map_err(err)?;
    let r = freq.summary["pearson_r"].unwrap_or(f64::NAN);
    notes.push(format!("frequency r {r:.3}"));
    if r.is_nan() || r <= 0.2 {
        failures.push(format!("frequency r {r:.3} <= 0.2"));
    }

    // Held-out single-code records whose diagnosis is exactly one template.
    let book = synthetic_codebook(&generator, gen_seed).map_err(err)?;
    let suggester = Suggester::new(full.state.clone(), full.vocab.clone(), corpus.inventory(), None)
        .map_err(|e| e.to_string())?;
    let [_, _, test_ids] = split_ids(&corpus, &plan);
    let (mut candidates, mut hits) = (0, 0);
    for id in &test_ids {
        let record = corpus.get(id).expect("split ids come from the corpus");
        let [code] = record.codes.iter().collect::<Vec<_>>()[..] else {
            continue;
        };
        let entry = book.iter().find(|c| &c.code == code).expect("codes come from the book");
        let diagnosis = clean_text(record.section(Section::Diagnosis));
        if !entry.templates.iter().any(|t| clean_text(t) == diagnosis) {
            continue;
        }
        candidates += 1;
        let input = build_input(record, &config.fields).map_err(err)?;
        let top = suggester.suggest(&input, 5, 0.5).map_err(|e| e.to_string())?;
        hits += usize::from(top.iter().any(|s| &s.code == code));
    }
    notes.push(format!("template code in top 5 for {hits}/{candidates} held-out records"));
    if candidates == 0 || hits < candidates {
        failures.push(format!("template code in top 5 for {hits}/{candidates}"));
    }

    let mut runner = Runner::new(&corpus, &plan, seed);
    runner.remember(&config, &full);
    let volume = volume_sweep(&mut runner, &config, &[0.25, 0.5, 0.75, 1.0], |_| Ok(())).map_err(err)?;
    let vf1: Vec<f64> = volume.column("f1").unwrap().into_iter().map(number).collect();
    notes.push(format!("volume F1 {vf1:.2?}"));
    if vf1[3] < vf1[0] - 2.0 {
        failures.push(format!("F1(1.0) {:.2} < F1(0.25) {:.2} - 2", vf1[3], vf1[0]));
    }

    let fields = field_study(
        &mut runner,
        &config,
        &[
            vec![Section::Diagnosis],
            vec![Section::Assessment],
            vec![Section::Diagnosis, Section::Assessment],
        ],
    )
    .map_err(err)?;
    let ff1: Vec<f64> = fields.column("f1").unwrap().into_iter().map(number).collect();
    notes.push(format!("fields F1 diag {:.2} assess {:.2} both {:.2}", ff1[0], ff1[1], ff1[2]));
    if ff1[0] <= ff1[1] {
        failures.push(format!("diagnosis-only {:.2} <= assessment-only {:.2}", ff1[0], ff1[1]));
    }

    let frozen = frozen_comparison(&mut runner, &config).map_err(err)?;
    let zf1: Vec<f64> = frozen.column("f1").unwrap().into_iter().map(number).collect();
    notes.push(format!("fine-tuned {:.2} frozen {:.2}", zf1[0], zf1[1]));
    if zf1[0] < zf1[1] {
        failures.push(format!("fine-tuned {:.2} < frozen {:.2}", zf1[0], zf1[1]));
    }

    let total = started.elapsed().as_secs_f64();
    notes.push(format!("total {total:.0}s"));
    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("{} | {}", failures.join("; "), notes.join("; ")))
    }
}

// Service

fn replay() -> Outcome {
    let records = ["p", "q", "r"];
    let codes = ["10", "20", "30"];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let open = |path: &Path| {
        let queue = records.iter().map(|r| ClinicalRecord::new(*r)).collect();
        DecisionStore::open(path, queue, Inventory::from_codes(codes)).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8080);
    let mut total_events = 0;
    for case in 0..1000 {
        let path = dir.path().join(format!("{case}.jsonl"));
        let mut store = open(&path);
        // Oracle state: per record, ordered list of (code, keep) decisions
        // and whether it was finalized.
        let mut decisions: BTreeMap<&str, Vec<(&str, bool)>> = BTreeMap::new();
        let mut finalized: BTreeSet<&str> = BTreeSet::new();
        let mut id = 0u64;
        for _ in 0..rng.random_range(0..30) {
            id += 1;
            let record = records[rng.random_range(0..records.len())];
            let code = codes[rng.random_range(0..codes.len())];
            let action = [Action::Accept, Action::Reject, Action::Augment, Action::Finalize][rng.random_range(0..4)];
            let request = DecisionRequest {
                record_id: record.into(),
                action,
                code: (action != Action::Finalize).then(|| code.to_string()),
                event_id: id,
                actor: "a".into(),
            };
            let result = store.record(request);
            ensure!(
                result.is_ok() != finalized.contains(record),
                "case {case}: event {id} on {record} accepted = {}",
                result.is_ok()
            );
            if result.is_err() {
                continue;
            }
            total_events += 1;
            match action {
                Action::Finalize => {
                    finalized.insert(record);
                }
                Action::Reject => decisions.entry(record).or_default().push((code, false)),
                _ => decisions.entry(record).or_default().push((code, true)),
            }
        }
        let mut expected = String::new();
        for record in &finalized {
            let mut set = Vec::new();
            for code in codes {
                let last = decisions.get(record).and_then(|d| d.iter().rev().find(|(c, _)| *c == code));
                if matches!(last, Some((_, true))) {
                    set.push(format!("\"{code}\""));
                }
            }
            expected.push_str(&format!("{{\"record_id\":\"{record}\",\"codes\":[{}]}}\n", set.join(",")));
        }
        let export = store.export(&RecordRange::default());
        ensure!(export == expected, "case {case}: export {export:?} expected {expected:?}");
        drop(store);
        let restarted = open(&path).export(&RecordRange::default());
        ensure!(restarted == export, "case {case}: export changed after restart");
    }
    Ok(format!("1000 sequences ({total_events} stored events) match the fold; restart exports identical"))
}

// CLI

const CLI_CONFIG: &str = r#"
seed = 5
out_dir = "out"
fields = ["diagnosis", "assessment"]

[generator]
records = 300
codes = 12

[tokenizer]
max_len = 48

[model]
dim = 16
blocks = 1
heads = 2

[train]
learning_rate = 3e-3
warmup_steps = 20
max_epochs = 4
patience = 4

[analysis]
volume_fractions = [0.5, 1.0]
"#;

const CLI_STEPS: &[&[&str]] = &[
    &["gen-synthetic"],
    &["split"],
    &["build-vocab"],
    &["train"],
    &["evaluate"],
    &["analyze", "frequency"],
    &["analyze", "depth"],
    &["analyze", "categories"],
    &["analyze", "volume"],
    &["analyze", "frozen"],
];

const METRIC_FILES: &[&str] = &[
    "model/train_log.csv",
    "model/test_metrics_classes.csv",
    "model/test_metrics.json",
    "eval/test_metrics_classes.csv",
    "eval/test_metrics.json",
    "analysis/frequency.csv",
    "analysis/depth.csv",
    "analysis/categories.csv",
    "analysis/volume.csv",
    "analysis/frozen.csv",
];

fn run_cli_pipeline(dir: &Path) -> Result<(), String> {
    std::fs::write(dir.join("run.toml"), CLI_CONFIG).map_err(|e| e.to_string())?;
    for step in CLI_STEPS {
        let out = Command::new(env!("CARGO_BIN_EXE_dxcode"))
            .current_dir(dir)
            .args(["--config", "run.toml"])
            .args(*step)
            .env("DXCODE_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            out.status.success(),
            "`dxcode {}` failed: {}",
            step.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        );
    }
    Ok(())
}

fn cli_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_cli_pipeline(a.path())?;
    run_cli_pipeline(b.path())?;
    for file in METRIC_FILES {
        let x = std::fs::read(a.path().join("out").join(file)).map_err(|e| format!("{file}: {e}"))?;
        let y = std::fs::read(b.path().join("out").join(file)).map_err(|e| format!("{file}: {e}"))?;
        ensure!(x == y, "{file} differs between runs");
    }
    let out = a.path().join("out");
    for kind in ["test_metrics_classes.csv", "test_metrics.json"] {
        let trained = std::fs::read(out.join("model").join(kind)).map_err(|e| e.to_string())?;
        let evaluated = std::fs::read(out.join("eval").join(kind)).map_err(|e| e.to_string())?;
        ensure!(trained == evaluated, "evaluate does not reproduce train's {kind}");
    }
    let volume = std::fs::read_to_string(out.join("analysis/volume.csv")).map_err(|e| e.to_string())?;
    ensure!(volume.lines().count() == 3, "volume table has {} lines", volume.lines().count());

    let bad = Command::new(env!("CARGO_BIN_EXE_dxcode"))
        .arg("frobnicate")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(!bad.status.success(), "unknown subcommand exited 0");
    ensure!(
        String::from_utf8_lossy(&bad.stderr).contains("Usage"),
        "unknown subcommand printed no usage"
    );
    Ok(format!(
        "{} metric files byte-identical across two runs; evaluate reproduces train",
        METRIC_FILES.len()
    ))
}
