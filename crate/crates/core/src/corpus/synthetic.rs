//! Synthetic visit corpus with Zipf-distributed diagnosis codes.
//!
//! Each code owns a few fixed surface templates built from pseudo-words that
//! are unique to that code, mixed with a shared modifier/anatomy vocabulary.
//! The diagnosis section names every assigned code once (plus distractor
//! words); the assessment section is filler narrative that mentions only a
//! random subset of the codes. The text-to-code mapping is therefore almost
//! deterministic from the diagnosis section and only partially recoverable
//! from the assessment.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;
use serde::{Deserialize, Serialize};

use super::{ClinicalRecord, Corpus, Section};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Number of visits.
    pub records: usize,
    /// Inventory size.
    pub codes: usize,
    pub zipf_exponent: f64,
    /// Mean number of codes per visit (at least 1).
    pub mean_codes: f64,
    /// Probability that a distractor word follows each diagnosis word.
    pub noise_rate: f64,
    /// Probability that a visit's code is also mentioned in the assessment.
    pub assessment_mention_rate: f64,
    pub assessment_min_words: usize,
    pub assessment_max_words: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            records: 2_000,
            codes: 50,
            zipf_exponent: 1.2,
            mean_codes: 2.0,
            noise_rate: 0.1,
            assessment_mention_rate: 0.3,
            assessment_min_words: 12,
            assessment_max_words: 30,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.codes < 1 {
            return fail("codes must be at least 1");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return fail("zipf_exponent must be finite and >= 0");
        }
        if !(self.mean_codes.is_finite() && self.mean_codes >= 1.0) {
            return fail("mean_codes must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return fail("noise_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.assessment_mention_rate) {
            return fail("assessment_mention_rate must lie in [0, 1]");
        }
        if self.assessment_min_words > self.assessment_max_words {
            return fail("assessment_min_words exceeds assessment_max_words");
        }
        Ok(())
    }

    /// Zipf probability mass over code ranks (rank 0 is the most frequent).
    pub fn zipf_weights(&self) -> Vec<f64> {
        (0..self.codes)
            .map(|rank| ((rank + 1) as f64).powf(-self.zipf_exponent))
            .collect()
    }
}

/// A generated code with its surface forms.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCode {
    pub code: String,
    /// Zipf rank, 0 = most frequent.
    pub rank: usize,
    pub term: String,
    pub templates: Vec<String>,
    /// Words unique to this code; every template contains at least one.
    pub keywords: Vec<String>,
}

/// Identifier of the code at a given Zipf rank. Fixed width, so lexicographic
/// order coincides with rank order.
pub fn synthetic_code_id(rank: usize) -> String {
    format!("{}", 700_000_000 + rank * 1_009)
}

const SYLLABLES: &[&str] = &[
    "ba", "be", "bo", "ca", "ce", "co", "da", "de", "di", "fa", "fe", "fo", "ga", "ge", "go",
    "ka", "ke", "ko", "la", "le", "li", "lo", "ma", "me", "mi", "mo", "na", "ne", "no", "pa",
    "pe", "pi", "po", "ra", "re", "ri", "ro", "sa", "se", "si", "so", "ta", "te", "ti", "to",
    "va", "ve", "vo", "za", "ze",
];
const SUFFIXES: &[&str] = &["itis", "osis", "oma", "algia", "pathy", "emia", "ectasia", "uria"];
const MODIFIERS: &[&str] = &[
    "acute", "chronic", "left", "right", "bilateral", "mild", "severe", "recurrent",
    "suspected", "focal", "diffuse", "primary", "secondary", "<b>", "progressive",
];
const ANATOMY: &[&str] = &[
    "ear", "eye", "skin", "liver", "kidney", "stifle", "hock", "carpus", "colon", "stomach",
    "lung", "heart", "spleen", "bladder", "tooth", "hoof", "fetlock", "spine", "thyroid",
];
const FILLER: &[&str] = &[
    "patient", "presented", "with", "history", "of", "noted", "owner", "reports", "was",
    "examination", "normal", "the", "and", "treated", "recheck", "in", "two", "weeks",
    "appetite", "good", "bright", "alert", "responsive", "discharged", "home", "on",
    "medication", "monitor", "for", "signs", "no", "further", "concerns", "today", "plan",
    "continue", "current", "diet", "radiographs", "performed", "bloodwork", "within",
    "limits", "discussed", "prognosis", "fair", "hydration", "adequate", "vitals", "stable",
    "sedated", "procedure", "uneventful", "recovery", "smooth", "advised", "rest", "return",
];
const DISTRACTORS: &[&str] = &[
    "possible", "likely", "rule", "out", "versus", "see", "below", "also", "hx", "r/o",
    "&amp;", "incidental", "resolved", "previously", "noted",
];

/// Code book: identifiers, preferred terms and surface templates.
///
/// Depends only on `(config.codes, seed)`, never on the record count.
pub fn synthetic_codebook(config: &SyntheticConfig, seed: u64) -> Result<Vec<SyntheticCode>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut used = BTreeSet::new();
    let mut fresh_word = |rng: &mut ChaCha8Rng| loop {
        let syllables = rng.random_range(2..=3);
        let word: String = (0..syllables)
            .map(|_| *SYLLABLES.choose(rng).expect("nonempty"))
            .collect();
        if used.insert(word.clone()) {
            return word;
        }
    };

    let mut book = Vec::with_capacity(config.codes);
    for rank in 0..config.codes {
        let stem = fresh_word(&mut rng);
        let alias = fresh_word(&mut rng);
        let suffix = SUFFIXES.choose(&mut rng).expect("nonempty");
        let anatomy = ANATOMY.choose(&mut rng).expect("nonempty");
        let modifier = MODIFIERS.choose(&mut rng).expect("nonempty");

        let term = format!("{stem}{suffix} of {anatomy}");
        let candidates = [
            term.clone(),
            format!("{modifier} {stem}{suffix}"),
            format!("{alias} {anatomy}"),
            format!("{anatomy} {stem}{suffix} {alias}"),
        ];
        let count = rng.random_range(2..=4);
        let templates = candidates[..count].to_vec();
        book.push(SyntheticCode {
            code: synthetic_code_id(rank),
            rank,
            term,
            templates,
            keywords: vec![format!("{stem}{suffix}"), alias],
        });
    }
    Ok(book)
}

/// Generates `config.records` visits; deterministic in `(config, seed)`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    let book = synthetic_codebook(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);

    let zipf = WeightedIndex::new(config.zipf_weights())
        .map_err(|e| Error::Config(format!("generator: {e}")))?;
    let extra_codes = Geometric::new(1.0 / config.mean_codes)
        .map_err(|e| Error::Config(format!("generator: {e}")))?;
    let width = config.records.max(1).to_string().len().max(6);

    let mut records = Vec::with_capacity(config.records);
    for i in 0..config.records {
        let wanted = (1 + extra_codes.sample(&mut rng) as usize).min(config.codes);
        let ranks = draw_distinct(&mut rng, &zipf, config, wanted);

        let mut order = ranks.clone();
        order.shuffle(&mut rng);
        let diagnosis = diagnosis_text(&mut rng, &book, &order, config.noise_rate);
        let assessment = assessment_text(&mut rng, &book, &order, config);
        let complaint = (0..rng.random_range(2..=5))
            .map(|_| *FILLER.choose(&mut rng).expect("nonempty"))
            .collect::<Vec<_>>()
            .join(" ");

        records.push(
            ClinicalRecord::new(format!("visit-{i:0width$}"))
                .with_section(Section::Diagnosis, diagnosis)
                .with_section(Section::Assessment, assessment)
                .with_section(Section::PresentingComplaint, complaint)
                .with_codes(ranks.iter().map(|&r| book[r].code.clone())),
        );
    }
    Corpus::new(records)
}

/// Draws `k` distinct ranks from the Zipf distribution (sampling without
/// replacement), returned in draw order.
fn draw_distinct(
    rng: &mut ChaCha8Rng,
    zipf: &WeightedIndex<f64>,
    config: &SyntheticConfig,
    k: usize,
) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; config.codes];
    let weights = config.zipf_weights();
    while chosen.len() < k {
        let mut pick = None;
        for _ in 0..64 {
            let r = zipf.sample(rng);
            if !taken[r] {
                pick = Some(r);
                break;
            }
        }
        let r = pick.unwrap_or_else(|| {
            // rejection keeps failing: sample directly from the remaining mass
            let remaining: f64 = (0..config.codes).filter(|&r| !taken[r]).map(|r| weights[r]).sum();
            let mut u = rng.random::<f64>() * remaining;
            let mut last = 0;
            for r in (0..config.codes).filter(|&r| !taken[r]) {
                last = r;
                u -= weights[r];
                if u <= 0.0 {
                    break;
                }
            }
            last
        });
        taken[r] = true;
        chosen.push(r);
    }
    chosen
}

fn diagnosis_text(
    rng: &mut ChaCha8Rng,
    book: &[SyntheticCode],
    order: &[usize],
    noise_rate: f64,
) -> String {
    let mut parts = Vec::with_capacity(order.len());
    for &rank in order {
        let template = book[rank].templates.choose(rng).expect("templates nonempty");
        let mut words = Vec::new();
        for word in template.split(' ') {
            words.push(word.to_string());
            if rng.random_bool(noise_rate) {
                words.push(DISTRACTORS.choose(rng).expect("nonempty").to_string());
            }
        }
        let mut phrase = words.join(" ");
        if rng.random_bool(0.3) {
            phrase = capitalize(&phrase);
        }
        parts.push(phrase);
    }
    parts.join("; ")
}

fn assessment_text(
    rng: &mut ChaCha8Rng,
    book: &[SyntheticCode],
    order: &[usize],
    config: &SyntheticConfig,
) -> String {
    let length = rng.random_range(config.assessment_min_words..=config.assessment_max_words);
    let mut words: Vec<String> = (0..length)
        .map(|_| FILLER.choose(rng).expect("nonempty").to_string())
        .collect();
    for &rank in order {
        if rng.random_bool(config.assessment_mention_rate) {
            let template = book[rank].templates.choose(rng).expect("templates nonempty");
            let at = rng.random_range(0..=words.len());
            words.insert(at, template.clone());
        }
    }
    capitalize(&words.join(" ")) + "."
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::clean_text;

    fn small(records: usize) -> SyntheticConfig {
        SyntheticConfig {
            records,
            codes: 20,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn zero_records_is_empty() {
        let corpus = generate_synthetic(&small(0), 1).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn bad_config_is_rejected() {
        let mut c = small(5);
        c.codes = 0;
        assert!(generate_synthetic(&c, 1).is_err());
        let mut c = small(5);
        c.mean_codes = 0.5;
        assert!(generate_synthetic(&c, 1).is_err());
        let mut c = small(5);
        c.zipf_exponent = -1.0;
        assert!(generate_synthetic(&c, 1).is_err());
        let mut c = small(5);
        c.noise_rate = 1.5;
        assert!(generate_synthetic(&c, 1).is_err());
    }

    #[test]
    fn deterministic_bytes() {
        let dump = |seed| {
            let mut buf = Vec::new();
            generate_synthetic(&small(200), seed).unwrap().write_jsonl(&mut buf).unwrap();
            buf
        };
        assert_eq!(dump(9), dump(9));
        assert_ne!(dump(9), dump(10));
    }

    #[test]
    fn every_visit_has_codes_named_in_diagnosis() {
        let config = small(300);
        let book = synthetic_codebook(&config, 4).unwrap();
        let corpus = generate_synthetic(&config, 4).unwrap();
        for record in corpus.records() {
            assert!(!record.codes.is_empty());
            let diagnosis = clean_text(record.section(Section::Diagnosis));
            for code in &record.codes {
                let entry = book.iter().find(|b| &b.code == code).unwrap();
                let hit = entry.keywords.iter().any(|k| diagnosis.contains(k.as_str()));
                assert!(hit, "{code} not found in {diagnosis}");
            }
        }
    }

    #[test]
    fn mean_codes_per_visit_tracks_lambda() {
        let config = SyntheticConfig {
            records: 4_000,
            codes: 200,
            mean_codes: 2.5,
            ..SyntheticConfig::default()
        };
        let corpus = generate_synthetic(&config, 3).unwrap();
        let mean = corpus.records().iter().map(|r| r.codes.len()).sum::<usize>() as f64
            / corpus.len() as f64;
        assert!((mean - 2.5).abs() < 0.1, "mean codes {mean}");
    }

    #[test]
    fn small_inventory_caps_code_count() {
        let config = SyntheticConfig {
            records: 50,
            codes: 2,
            mean_codes: 5.0,
            zipf_exponent: 3.0,
            ..SyntheticConfig::default()
        };
        let corpus = generate_synthetic(&config, 1).unwrap();
        assert!(corpus.records().iter().all(|r| (1..=2).contains(&r.codes.len())));
    }

    #[test]
    fn codebook_terms_are_unique() {
        let book = synthetic_codebook(&SyntheticConfig { codes: 300, ..Default::default() }, 2).unwrap();
        let terms: BTreeSet<_> = book.iter().map(|b| b.term.clone()).collect();
        assert_eq!(terms.len(), 300);
        assert!(book.iter().all(|b| (2..=4).contains(&b.templates.len())));
    }
}
