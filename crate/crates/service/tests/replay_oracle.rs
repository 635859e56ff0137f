//! Export versus a brute-force reading of the log file on random decision
//! sequences, plus restart equivalence.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dxcode_core::corpus::{ClinicalRecord, Inventory};
use dxcode_service::{Action, DecisionRequest, DecisionStore, RecordRange};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const RECORDS: [&str; 4] = ["a", "b", "c", "d"];
const CODES: [&str; 4] = ["11", "22", "33", "44"];

fn open(path: &Path) -> DecisionStore {
    let queue = RECORDS.iter().map(|r| ClinicalRecord::new(*r)).collect();
    DecisionStore::open(path, queue, Inventory::from_codes(CODES)).unwrap()
}

fn random_request(rng: &mut ChaCha8Rng, next_id: &mut u64, last: &Option<DecisionRequest>) -> DecisionRequest {
    if let Some(prev) = last {
        if rng.random_bool(0.08) {
            return prev.clone();
        }
    }
    let event_id = if rng.random_bool(0.05) {
        next_id.saturating_sub(rng.random_range(1..=3))
    } else {
        *next_id += rng.random_range(1..=3);
        *next_id
    };
    let action = match rng.random_range(0..10) {
        0..=3 => Action::Accept,
        4..=5 => Action::Reject,
        6..=7 => Action::Augment,
        _ => Action::Finalize,
    };
    let code = match action {
        Action::Finalize => None,
        _ if rng.random_bool(0.05) => Some("99".to_string()),
        _ => Some(CODES[rng.random_range(0..CODES.len())].to_string()),
    };
    DecisionRequest {
        record_id: RECORDS[rng.random_range(0..RECORDS.len())].to_string(),
        action,
        code,
        event_id,
        actor: "coder".into(),
    }
}

/// For each record finalized in the file, the codes whose last
/// accept/augment/reject event before the finalize was not a reject.
fn brute_force_export(log: &str) -> String {
    let events: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut out = BTreeMap::new();
    for record in RECORDS {
        let mine: Vec<&Value> = events.iter().filter(|e| e["record_id"] == record).collect();
        let Some(end) = mine.iter().position(|e| e["action"] == "finalize") else {
            continue;
        };
        let mut codes = BTreeSet::new();
        for code in CODES {
            let last = mine[..end].iter().rev().find(|e| e["code"] == code);
            if let Some(e) = last {
                if e["action"] != "reject" {
                    codes.insert(code);
                }
            }
        }
        out.insert(record, codes);
    }
    out.iter()
        .map(|(r, codes)| {
            let list: Vec<String> = codes.iter().map(|c| format!("\"{c}\"")).collect();
            format!("{{\"record_id\":\"{r}\",\"codes\":[{}]}}\n", list.join(","))
        })
        .collect()
}

#[test]
fn export_matches_brute_force_fold_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let path = dir.path().join(format!("log{case}.jsonl"));
        let mut store = open(&path);
        let mut next_id = 0;
        let mut last = None;
        let mut acked = 0;
        for _ in 0..rng.random_range(0..24) {
            let request = random_request(&mut rng, &mut next_id, &last);
            if let Ok(ack) = store.record(request.clone()) {
                acked += usize::from(!ack.duplicate);
            }
            last = Some(request);
        }

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), acked, "case {case}");
        let ids: Vec<u64> = text
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["event_id"].as_u64().unwrap())
            .collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]), "case {case}");

        let export = store.export(&RecordRange::default());
        assert_eq!(export, brute_force_export(&text), "case {case}");
        drop(store);
        assert_eq!(open(&path).export(&RecordRange::default()), export, "case {case}");
    }
}
