//! Support-weighted precision, recall and F1, exact match, and replicate
//! confidence intervals.
//!
//! Metrics are percentages kept at full precision; rounding to two decimals
//! happens only in the JSON and CSV writers.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Inventory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub code: String,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub classes: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: f64,
    pub per_class: Vec<ClassReport>,
}

/// `num / den`, or 0 when the denominator is 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

fn check_lengths<A, B>(targets: &[A], predictions: &[B]) -> Result<()> {
    if targets.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            left: targets.len(),
            right: predictions.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::Empty("records"));
    }
    Ok(())
}

/// Evaluates code-identifier sets against the inventory's classes.
pub fn evaluate(
    targets: &[BTreeSet<String>],
    predictions: &[BTreeSet<String>],
    inventory: &Inventory,
) -> Result<EvalReport> {
    check_lengths(targets, predictions)?;
    let to_indices = |sets: &[BTreeSet<String>]| -> Result<Vec<BTreeSet<usize>>> {
        sets.iter().map(|s| inventory.indices(s.iter())).collect()
    };
    evaluate_indices(&to_indices(targets)?, &to_indices(predictions)?, inventory.codes())
}

/// Evaluates class-index sets; `codes[i]` names class `i`.
pub fn evaluate_indices(
    targets: &[BTreeSet<usize>],
    predictions: &[BTreeSet<usize>],
    codes: &[String],
) -> Result<EvalReport> {
    check_lengths(targets, predictions)?;
    let classes = codes.len();
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (t, p) in targets.iter().zip(predictions) {
        if let Some(&bad) = t.iter().chain(p).find(|&&i| i >= classes) {
            return Err(Error::UnknownCode(format!("class index {bad} (of {classes})")));
        }
        for &i in t {
            if p.contains(&i) {
                tp[i] += 1;
            } else {
                fn_[i] += 1;
            }
        }
        for &i in p.difference(t) {
            fp[i] += 1;
        }
    }

    let per_class: Vec<ClassReport> = (0..classes)
        .map(|i| {
            let precision = ratio(tp[i] as f64, (tp[i] + fp[i]) as f64);
            let recall = ratio(tp[i] as f64, (tp[i] + fn_[i]) as f64);
            ClassReport {
                code: codes[i].clone(),
                support: tp[i] + fn_[i],
                tp: tp[i],
                fp: fp[i],
                fn_: fn_[i],
                precision: 100.0 * precision,
                recall: 100.0 * recall,
                f1: 100.0 * harmonic(precision, recall),
            }
        })
        .collect();
    let (precision, recall, f1) = weighted(&per_class);
    Ok(EvalReport {
        records: targets.len(),
        classes,
        precision,
        recall,
        f1,
        exact_match: exact_match(targets, predictions)?,
        per_class,
    })
}

/// Support-weighted (precision, recall, F1) over the given classes; 0 when
/// no class has support.
pub fn weighted(classes: &[ClassReport]) -> (f64, f64, f64) {
    let total: usize = classes.iter().map(|c| c.support).sum();
    let avg = |f: fn(&ClassReport) -> f64| {
        ratio(
            classes.iter().map(|c| c.support as f64 * f(c)).sum(),
            total as f64,
        )
    };
    (avg(|c| c.precision), avg(|c| c.recall), avg(|c| c.f1))
}

/// Percentage of records whose predicted set equals the target set.
pub fn exact_match<T: Ord>(targets: &[BTreeSet<T>], predictions: &[BTreeSet<T>]) -> Result<f64> {
    check_lengths(targets, predictions)?;
    let hits = targets.iter().zip(predictions).filter(|(t, p)| t == p).count();
    Ok(100.0 * hits as f64 / targets.len() as f64)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl EvalReport {
    /// Copy with every metric rounded to two decimals.
    pub fn rounded(&self) -> EvalReport {
        EvalReport {
            precision: round2(self.precision),
            recall: round2(self.recall),
            f1: round2(self.f1),
            exact_match: round2(self.exact_match),
            per_class: self
                .per_class
                .iter()
                .map(|c| ClassReport {
                    precision: round2(c.precision),
                    recall: round2(c.recall),
                    f1: round2(c.f1),
                    ..c.clone()
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn class(&self, code: &str) -> Option<&ClassReport> {
        self.per_class.iter().find(|c| c.code == code)
    }

    /// Summary JSON (rounded); per-class rows are left to the CSV.
    pub fn write_json<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let r = self.rounded();
        let summary = serde_json::json!({
            "records": r.records,
            "classes": r.classes,
            "classes_with_support": r.per_class.iter().filter(|c| c.support > 0).count(),
            "precision": r.precision,
            "recall": r.recall,
            "f1": r.f1,
            "exact_match": r.exact_match,
        });
        serde_json::to_writer_pretty(writer, &summary).map_err(std::io::Error::from)
    }

    /// `code,support,tp,fp,fn,precision,recall,f1`, one row per class.
    pub fn write_class_csv<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writeln!(writer, "code,support,tp,fp,fn,precision,recall,f1")?;
        for c in &self.per_class {
            writeln!(
                writer,
                "{},{},{},{},{},{:.2},{:.2},{:.2}",
                c.code, c.support, c.tp, c.fp, c.fn_, c.precision, c.recall, c.f1
            )?;
        }
        Ok(())
    }

    /// Writes `<stem>.json` and `<stem>_classes.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        let mut w = BufWriter::new(fs::File::create(&json).map_err(|e| Error::io(&json, e))?);
        self.write_json(&mut w)
            .and_then(|_| writeln!(w))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}_classes.csv"));
        let mut w = BufWriter::new(fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?);
        self.write_class_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&csv, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub half_width: f64,
    pub std_dev: f64,
    pub n_runs: usize,
    pub t_quantile: f64,
}

/// `mean +- t_{(1+level)/2, n-1} * s / sqrt(n)` with the sample standard
/// deviation `s`.
pub fn confidence_interval(values: &[f64], level: f64) -> Result<ConfidenceInterval> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewValues { needed: 2, got: n });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must be in (0, 1), got {level}")));
    }
    // Identical values must give exactly zero width; the summed mean can
    // round away from the common value.
    if values.iter().all(|v| *v == values[0]) {
        let mean = values[0];
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
        return Ok(ConfidenceInterval {
            mean,
            half_width: 0.0,
            std_dev: 0.0,
            n_runs: n,
            t_quantile: dist.inverse_cdf(0.5 + level / 2.0),
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let std_dev = var.sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let t_quantile = dist.inverse_cdf(0.5 + level / 2.0);
    Ok(ConfidenceInterval {
        mean,
        half_width: t_quantile * std_dev / (n as f64).sqrt(),
        std_dev,
        n_runs: n,
        t_quantile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(v: &[&[usize]]) -> Vec<BTreeSet<usize>> {
        v.iter().map(|s| s.iter().copied().collect()).collect()
    }

    fn codes(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("{i}")).collect()
    }

    #[test]
    fn identical_runs_have_zero_width() {
        for v in [61.3, 0.1, 77.78] {
            let ci = confidence_interval(&[v; 5], 0.95).unwrap();
            assert_eq!((ci.mean, ci.half_width), (v, 0.0));
        }
    }

    #[test]
    fn worked_example() {
        let t = sets(&[&[0, 1], &[1]]);
        let p = sets(&[&[0], &[1, 2]]);
        let r = evaluate_indices(&t, &p, &codes(3)).unwrap().rounded();
        assert_eq!((r.precision, r.recall, r.f1, r.exact_match), (100.0, 66.67, 77.78, 0.0));
        assert_eq!(r.per_class[2].support, 0);
        assert_eq!(r.per_class[2].fp, 1);
    }

    #[test]
    fn identity_is_perfect() {
        let t = sets(&[&[0, 1], &[], &[2]]);
        let r = evaluate_indices(&t, &t, &codes(3)).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.exact_match), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn exact_match_cases() {
        let empty: Vec<BTreeSet<usize>> = vec![BTreeSet::new()];
        assert_eq!(exact_match(&empty, &empty).unwrap(), 100.0);
        assert_eq!(exact_match(&sets(&[&[1], &[2]]), &sets(&[&[1], &[3]])).unwrap(), 50.0);
        assert!(exact_match(&sets(&[&[1]]), &sets(&[])).is_err());
    }

    #[test]
    fn evaluate_by_code() {
        let inv = Inventory::from_codes(["10", "20", "30"]);
        let s = |v: &[&str]| v.iter().map(|c| c.to_string()).collect::<BTreeSet<_>>();
        let r = evaluate(&[s(&["10", "20"]), s(&["20"])], &[s(&["10"]), s(&["20", "30"])], &inv).unwrap();
        assert!((r.f1 - 700.0 / 9.0).abs() < 1e-12);
        assert!(evaluate(&[s(&["99"])], &[s(&[])], &inv).is_err());
        assert!(matches!(
            evaluate(&[s(&["10"])], &[], &inv),
            Err(Error::LengthMismatch { left: 1, right: 0 })
        ));
    }

    #[test]
    fn class_csv_layout() {
        let r = evaluate_indices(&sets(&[&[0, 1], &[1]]), &sets(&[&[0], &[1, 2]]), &codes(3)).unwrap();
        let mut buf = Vec::new();
        r.write_class_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "code,support,tp,fp,fn,precision,recall,f1\n\
             1,1,1,0,0,100.00,100.00,100.00\n\
             2,2,1,0,1,100.00,50.00,66.67\n\
             3,0,0,1,0,0.00,0.00,0.00\n"
        );
    }

    #[test]
    fn interval_examples() {
        let ci = confidence_interval(&[70.0, 72.0, 74.0], 0.95).unwrap();
        assert_eq!(ci.mean, 72.0);
        assert!((ci.half_width - 4.968).abs() < 1e-3);
        assert!((ci.t_quantile - 4.302653).abs() < 1e-6);
        let flat = confidence_interval(&[5.5, 5.5, 5.5], 0.95).unwrap();
        assert_eq!(flat.half_width, 0.0);
        assert!(matches!(
            confidence_interval(&[1.0], 0.95),
            Err(Error::TooFewValues { needed: 2, got: 1 })
        ));
    }
}
