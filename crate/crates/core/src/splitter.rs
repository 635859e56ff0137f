//! Iterative stratification for multi-label corpora.
//!
//! Labels are processed rarest-first (fewest unassigned records remaining).
//! Each unassigned record carrying the current label goes to the open split
//! with the largest remaining demand for that label, where demand is
//! `fraction * label_support - already_assigned`. Ties fall to the split with
//! the most remaining capacity, then to a seeded uniform choice. Records
//! without labels are placed last, by remaining capacity.
//!
//! Every split has a hard integer capacity (largest-remainder rounding of
//! `fraction * n`); a full split is closed to further records, so split sizes
//! are exact.
//!
//! Greedy assignment alone lets a record's other labels drift, so a repair
//! pass follows: while some label's count in some split is more than one
//! record away from `fraction * support`, the swap of two records between
//! splits that most reduces the total excess (then the squared deviation) is
//! applied. Swaps keep split sizes fixed. The pass stops when every label is
//! within one record of its target or no swap improves.
//!
//! The seeded choice uses a 64-bit linear congruential generator
//! `state = state * 6364136223846793005 + 1442695040888963407 (mod 2^64)`,
//! starting from the seed; a choice among `k` tied candidates advances the
//! state once and takes `(state >> 33) % k`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};

const TIE_EPS: f64 = 1e-9;

/// The documented tie-breaking generator.
#[derive(Debug, Clone)]
pub struct Lcg(u64);

impl Lcg {
    pub const MULTIPLIER: u64 = 6364136223846793005;
    pub const INCREMENT: u64 = 1442695040888963407;

    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(Self::MULTIPLIER).wrapping_add(Self::INCREMENT);
        self.0
    }

    pub fn choose(&mut self, k: usize) -> usize {
        ((self.next_u64() >> 33) % k as u64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fractions(pub [f64; 3]);

impl Default for Fractions {
    fn default() -> Self {
        Fractions([0.8, 0.1, 0.1])
    }
}

impl Fractions {
    pub fn validate(&self) -> Result<()> {
        let f = &self.0;
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("split fractions must be nonnegative: {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub fractions: Fractions,
    pub seed: u64,
    pub assignment: BTreeMap<String, Split>,
}

#[derive(Serialize, Deserialize)]
struct PlanLine {
    record_id: String,
    split: Split,
}

impl SplitPlan {
    pub fn get(&self, record_id: &str) -> Option<Split> {
        self.assignment.get(record_id).copied()
    }

    /// Record ids in `split`, in corpus order.
    pub fn ids_in<'a>(&self, corpus: &'a Corpus, split: Split) -> Vec<&'a str> {
        corpus
            .records()
            .iter()
            .filter(|r| self.get(&r.record_id) == Some(split))
            .map(|r| r.record_id.as_str())
            .collect()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for split in self.assignment.values() {
            sizes[*split as usize] += 1;
        }
        sizes
    }

    /// JSONL of `{record_id, split}`, sorted by record id.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (record_id, split) in &self.assignment {
            let line = serde_json::to_string(&PlanLine {
                record_id: record_id.clone(),
                split: *split,
            })
            .expect("plan lines serialize");
            writeln!(out, "{line}").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a persisted plan. Fractions are recovered from the assignment
    /// counts and the seed is unknown (0).
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut assignment = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: PlanLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if assignment.insert(parsed.record_id.clone(), parsed.split).is_some() {
                return Err(Error::DuplicateRecord(parsed.record_id));
            }
        }
        let mut plan = SplitPlan {
            fractions: Fractions::default(),
            seed: 0,
            assignment,
        };
        let n = plan.assignment.len().max(1) as f64;
        let sizes = plan.sizes();
        plan.fractions = Fractions(sizes.map(|s| s as f64 / n));
        Ok(plan)
    }

    /// Checks that the plan covers exactly the corpus records.
    pub fn check_covers(&self, corpus: &Corpus) -> Result<()> {
        if self.assignment.len() != corpus.len() {
            return Err(Error::Config(format!(
                "split plan has {} records, corpus has {}",
                self.assignment.len(),
                corpus.len()
            )));
        }
        if let Some(r) = corpus.records().iter().find(|r| self.get(&r.record_id).is_none()) {
            return Err(Error::Config(format!("record `{}` missing from split plan", r.record_id)));
        }
        Ok(())
    }
}

/// Largest-remainder integer allocation of `n` items over `fractions`.
fn capacities(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut caps: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - caps[a] as f64;
        let rb = exact[b] - caps[b] as f64;
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let mut left = n - caps.iter().sum::<usize>().min(n);
    for i in order {
        if left == 0 {
            break;
        }
        caps[i] += 1;
        left -= 1;
    }
    caps
}

/// Core assignment over label sets. Returns a bin index per record.
fn stratify(labels: &[BTreeSet<usize>], fractions: &[f64], seed: u64) -> Vec<usize> {
    let n = labels.len();
    let bins = fractions.len();
    let mut rng = Lcg::new(seed);
    let mut remaining_cap: Vec<usize> = capacities(n, fractions);
    let desired_cap: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut assigned_count = vec![0usize; bins];

    let mut support: HashMap<usize, usize> = HashMap::new();
    let mut records_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, set) in labels.iter().enumerate() {
        for &l in set {
            *support.entry(l).or_default() += 1;
            records_of.entry(l).or_default().push(r);
        }
    }
    let mut label_assigned: HashMap<(usize, usize), usize> = HashMap::new();
    let mut unassigned_with: BTreeMap<usize, usize> = support.iter().map(|(&l, &s)| (l, s)).collect();
    let mut bin_of: Vec<Option<usize>> = vec![None; n];

    let pick = |candidates: Vec<usize>, rng: &mut Lcg| -> usize {
        if candidates.len() == 1 {
            candidates[0]
        } else {
            candidates[rng.choose(candidates.len())]
        }
    };
    let argmax = |open: &[usize], score: &dyn Fn(usize) -> f64| -> Vec<usize> {
        let best = open.iter().map(|&b| score(b)).fold(f64::NEG_INFINITY, f64::max);
        open.iter().copied().filter(|&b| score(b) >= best - TIE_EPS).collect()
    };

    loop {
        let label = unassigned_with
            .iter()
            .filter(|(_, &left)| left > 0)
            .min_by_key(|(&l, &left)| (left, l))
            .map(|(&l, _)| l);
        let Some(label) = label else { break };

        for &r in &records_of[&label] {
            if bin_of[r].is_some() {
                continue;
            }
            let open: Vec<usize> = (0..bins).filter(|&b| remaining_cap[b] > 0).collect();
            let demand = |b: usize| {
                fractions[b] * support[&label] as f64
                    - *label_assigned.get(&(label, b)).unwrap_or(&0) as f64
            };
            let mut tied = argmax(&open, &demand);
            if tied.len() > 1 {
                let capacity = |b: usize| desired_cap[b] - assigned_count[b] as f64;
                tied = argmax(&tied, &capacity);
            }
            let b = pick(tied, &mut rng);

            bin_of[r] = Some(b);
            remaining_cap[b] -= 1;
            assigned_count[b] += 1;
            for &l in &labels[r] {
                *label_assigned.entry((l, b)).or_default() += 1;
                *unassigned_with.get_mut(&l).expect("known label") -= 1;
            }
        }
    }

    for r in 0..n {
        if bin_of[r].is_none() {
            let open: Vec<usize> = (0..bins).filter(|&b| remaining_cap[b] > 0).collect();
            let capacity = |b: usize| desired_cap[b] - assigned_count[b] as f64;
            let b = pick(argmax(&open, &capacity), &mut rng);
            bin_of[r] = Some(b);
            remaining_cap[b] -= 1;
            assigned_count[b] += 1;
        }
    }
    let mut bins_out: Vec<usize> = bin_of.into_iter().map(|b| b.expect("all assigned")).collect();
    rebalance(labels, &mut bins_out, fractions, &support);
    bins_out
}

/// Label-count bookkeeping for the repair pass.
struct Balance<'a> {
    fractions: &'a [f64],
    support: &'a HashMap<usize, usize>,
    counts: HashMap<(usize, usize), i64>,
}

impl Balance<'_> {
    fn target(&self, label: usize, bin: usize) -> f64 {
        self.fractions[bin] * self.support[&label] as f64
    }

    /// (excess beyond +-1, squared deviation) of a single cell at `count`.
    fn cell_cost(&self, label: usize, bin: usize, count: i64) -> (f64, f64) {
        let dev = count as f64 - self.target(label, bin);
        ((dev.abs() - 1.0 - TIE_EPS).max(0.0), dev * dev)
    }

    fn count(&self, label: usize, bin: usize) -> i64 {
        *self.counts.get(&(label, bin)).unwrap_or(&0)
    }

    /// Cost change of moving record `a` from `ba` to `bb` and record `b` the
    /// other way.
    fn swap_delta(&self, la: &BTreeSet<usize>, ba: usize, lb: &BTreeSet<usize>, bb: usize) -> (f64, f64) {
        let mut delta = (0.0, 0.0);
        let mut touch = |label: usize, bin: usize, change: i64| {
            let now = self.count(label, bin);
            let before = self.cell_cost(label, bin, now);
            let after = self.cell_cost(label, bin, now + change);
            delta.0 += after.0 - before.0;
            delta.1 += after.1 - before.1;
        };
        for &l in la.difference(lb) {
            touch(l, ba, -1);
            touch(l, bb, 1);
        }
        for &l in lb.difference(la) {
            touch(l, bb, -1);
            touch(l, ba, 1);
        }
        delta
    }

    fn violations(&self, bins: usize) -> Vec<(usize, usize)> {
        let mut labels: Vec<usize> = self.support.keys().copied().collect();
        labels.sort_unstable();
        let mut out = Vec::new();
        for l in labels {
            for b in 0..bins {
                if self.cell_cost(l, b, self.count(l, b)).0 > 0.0 {
                    out.push((l, b));
                }
            }
        }
        out
    }
}

fn rebalance(
    labels: &[BTreeSet<usize>],
    bin_of: &mut [usize],
    fractions: &[f64],
    support: &HashMap<usize, usize>,
) {
    let bins = fractions.len();
    let mut balance = Balance {
        fractions,
        support,
        counts: HashMap::new(),
    };
    for (r, set) in labels.iter().enumerate() {
        for &l in set {
            *balance.counts.entry((l, bin_of[r])).or_default() += 1;
        }
    }

    let mut records_of: HashMap<usize, Vec<usize>> = HashMap::new();
    for (r, set) in labels.iter().enumerate() {
        for &l in set {
            records_of.entry(l).or_default().push(r);
        }
    }

    let max_rounds = 4 * labels.len() + 16;
    for _ in 0..max_rounds {
        let violations = balance.violations(bins);
        if violations.is_empty() {
            return;
        }
        let mut best: Option<((f64, f64), usize, usize)> = None;
        for &(label, bin) in &violations {
            let surplus = balance.count(label, bin) as f64 > balance.target(label, bin);
            for &a in &records_of[&label] {
                // surplus: move a record with the label out of `bin`;
                // deficit: move one into it
                if (bin_of[a] == bin) != surplus {
                    continue;
                }
                for b in 0..labels.len() {
                    let b_ok = if surplus { bin_of[b] != bin } else { bin_of[b] == bin };
                    if !b_ok || bin_of[b] == bin_of[a] || labels[b].contains(&label) {
                        continue;
                    }
                    let delta = balance.swap_delta(&labels[a], bin_of[a], &labels[b], bin_of[b]);
                    let improves = delta.0 < -TIE_EPS || (delta.0.abs() <= TIE_EPS && delta.1 < -TIE_EPS);
                    let better = match best {
                        None => true,
                        Some((d, _, _)) => delta.0 < d.0 - TIE_EPS
                            || ((delta.0 - d.0).abs() <= TIE_EPS && delta.1 < d.1 - TIE_EPS),
                    };
                    if improves && better {
                        best = Some((delta, a, b));
                    }
                }
            }
        }
        let Some((_, a, b)) = best else { return };
        let (ba, bb) = (bin_of[a], bin_of[b]);
        for &l in &labels[a] {
            *balance.counts.entry((l, ba)).or_default() -= 1;
            *balance.counts.entry((l, bb)).or_default() += 1;
        }
        for &l in &labels[b] {
            *balance.counts.entry((l, bb)).or_default() -= 1;
            *balance.counts.entry((l, ba)).or_default() += 1;
        }
        bin_of.swap(a, b);
    }
}

fn label_sets(corpus: &Corpus, ids: &[&str]) -> Vec<BTreeSet<usize>> {
    let inventory = corpus.inventory();
    let by_id: HashMap<&str, &crate::corpus::ClinicalRecord> =
        corpus.records().iter().map(|r| (r.record_id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            by_id[id]
                .codes
                .iter()
                .map(|c| inventory.index_of(c).expect("inventory covers records"))
                .collect()
        })
        .collect()
}

/// Stratified train/validation/test partition.
pub fn stratified_split(corpus: &Corpus, fractions: Fractions, seed: u64) -> Result<SplitPlan> {
    fractions.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let ids: Vec<&str> = corpus.records().iter().map(|r| r.record_id.as_str()).collect();
    let bins = stratify(&label_sets(corpus, &ids), &fractions.0, seed);
    let assignment = ids
        .iter()
        .zip(bins)
        .map(|(id, b)| (id.to_string(), Split::ALL[b]))
        .collect();
    Ok(SplitPlan {
        fractions,
        seed,
        assignment,
    })
}

/// Stratified subsample of the training split holding
/// `round(fraction * |train|)` records. Returned in corpus order.
pub fn subset_training(
    corpus: &Corpus,
    plan: &SplitPlan,
    fraction: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let train = plan.ids_in(corpus, Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if fraction == 1.0 {
        return Ok(train.iter().map(|s| s.to_string()).collect());
    }
    let keep = (fraction * train.len() as f64).round() as usize;
    let keep_fraction = keep as f64 / train.len() as f64;
    let bins = stratify(&label_sets(corpus, &train), &[keep_fraction, 1.0 - keep_fraction], seed);
    Ok(train
        .iter()
        .zip(bins)
        .filter(|(_, b)| *b == 0)
        .map(|(id, _)| id.to_string())
        .collect())
}
