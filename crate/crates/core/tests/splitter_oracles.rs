//! Recount oracle for the stratified splitter on random multi-label corpora.

use std::collections::BTreeMap;

use dxcode_core::corpus::{ClinicalRecord, Corpus, Split};
use dxcode_core::splitter::{stratified_split, subset_training, Fractions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_corpus(rng: &mut ChaCha8Rng) -> Corpus {
    let n = rng.random_range(1..=200);
    let labels = rng.random_range(1..=20);
    let records = (0..n)
        .map(|i| {
            let k = rng.random_range(0..=3);
            let codes: Vec<String> = (0..k).map(|_| rng.random_range(0..labels).to_string()).collect();
            ClinicalRecord::new(format!("r{i}")).with_codes(codes)
        })
        .collect();
    Corpus::new(records).unwrap()
}

/// Per-label counts per split, recomputed from scratch.
fn recount(corpus: &Corpus, split_of: impl Fn(&str) -> Option<Split>) -> BTreeMap<String, [usize; 3]> {
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for record in corpus.records() {
        if let Some(split) = split_of(&record.record_id) {
            for code in &record.codes {
                counts.entry(code.clone()).or_default()[split as usize] += 1;
            }
        }
    }
    counts
}

#[test]
fn label_counts_track_fractions() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240501);
    let fractions = Fractions::default();
    let mut worst = 0.0f64;
    let mut violations = 0;
    for case in 0..300 {
        let corpus = random_corpus(&mut rng);
        let plan = stratified_split(&corpus, fractions, case).unwrap();
        assert_eq!(plan.assignment.len(), corpus.len());
        let counts = recount(&corpus, |id| plan.get(id));
        for (code, per_split) in counts {
            let support: usize = per_split.iter().sum();
            if support < 10 {
                continue;
            }
            for s in 0..3 {
                let dev = (per_split[s] as f64 - fractions.0[s] * support as f64).abs();
                worst = worst.max(dev);
                if dev > 1.0 + 1e-9 {
                    violations += 1;
                    eprintln!("case {case} code {code} split {s}: {per_split:?} support {support}");
                }
            }
        }
    }
    eprintln!("worst deviation {worst}");
    assert_eq!(violations, 0);
}

#[test]
fn subset_label_counts_track_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = 0;
    for case in 0..100 {
        let records: Vec<ClinicalRecord> = (0..250)
            .map(|i| {
                let k = rng.random_range(1..=2);
                let codes: Vec<String> = (0..k).map(|_| rng.random_range(0..12).to_string()).collect();
                ClinicalRecord::new(format!("r{i}")).with_codes(codes)
            })
            .collect();
        let corpus = Corpus::new(records).unwrap();
        let plan = stratified_split(&corpus, Fractions::default(), case).unwrap();
        let subset = subset_training(&corpus, &plan, 0.25, case).unwrap();
        let train = plan.ids_in(&corpus, Split::Train);
        assert_eq!(subset.len(), (0.25 * train.len() as f64).round() as usize);
        let train_counts = recount(&corpus, |id| plan.get(id).filter(|s| *s == Split::Train));
        let sub_counts = recount(&corpus, |id| subset.iter().any(|s| s == id).then_some(Split::Train));
        for (code, c) in train_counts {
            let support = c[0];
            if support < 8 {
                continue;
            }
            let got = sub_counts.get(&code).map_or(0, |c| c[0]);
            if (got as f64 - 0.25 * support as f64).abs() > 1.0 + 1e-9 {
                violations += 1;
                eprintln!("case {case} code {code}: {got} of {support}");
            }
        }
    }
    assert_eq!(violations, 0);
}
