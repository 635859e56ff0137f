//! Append-only decision log.
//!
//! One JSON object per line, ids strictly increasing:
//!
//! ```text
//! {"event_id":7,"record_id":"v12","timestamp_ms":1760745600000,"action":"accept","code":"3135009","actor":"coder-1"}
//! ```
//!
//! A line is acknowledged only after it and its newline reach the disk. A
//! final line without a newline is the remnant of an interrupted append and
//! is cut off when the log is reopened.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Accept,
    Reject,
    Augment,
    Finalize,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Accept => "accept",
            Action::Reject => "reject",
            Action::Augment => "augment",
            Action::Finalize => "finalize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionEvent {
    pub event_id: u64,
    pub record_id: String,
    /// UTC milliseconds, assigned when the event is appended.
    pub timestamp_ms: u64,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    pub actor: String,
}

impl DecisionEvent {
    /// Equal apart from the timestamp.
    pub fn same_payload(&self, other: &DecisionEvent) -> bool {
        self.event_id == other.event_id
            && self.record_id == other.record_id
            && self.action == other.action
            && self.code == other.code
            && self.actor == other.actor
    }
}

/// Replayed state of one record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RecordState {
    pub codes: BTreeSet<String>,
    pub finalized: bool,
}

/// Folds the log in id order. Accept and augment add the code, reject
/// removes it, so the last decision about a code wins. Nothing changes a
/// record after its finalize event.
pub fn replay<'a, I>(events: I) -> BTreeMap<String, RecordState>
where
    I: IntoIterator<Item = &'a DecisionEvent>,
{
    let mut states = BTreeMap::new();
    for event in events {
        apply(&mut states, event);
    }
    states
}

/// One step of [`replay`].
pub fn apply(states: &mut BTreeMap<String, RecordState>, event: &DecisionEvent) {
    let state = states.entry(event.record_id.clone()).or_default();
    if state.finalized {
        return;
    }
    match (event.action, &event.code) {
        (Action::Accept | Action::Augment, Some(code)) => {
            state.codes.insert(code.clone());
        }
        (Action::Reject, Some(code)) => {
            state.codes.remove(code);
        }
        (Action::Finalize, _) => state.finalized = true,
        _ => {}
    }
}

#[derive(Debug, Serialize)]
struct ExportLine<'a> {
    record_id: &'a str,
    codes: &'a BTreeSet<String>,
}

/// Inclusive record-id bounds, compared as strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
pub struct RecordRange {
    pub from: Option<String>,
    pub to: Option<String>,
}

impl RecordRange {
    pub fn contains(&self, record_id: &str) -> bool {
        self.from.as_deref().is_none_or(|f| record_id >= f) && self.to.as_deref().is_none_or(|t| record_id <= t)
    }
}

/// Finalized records in record-id order, one `{"record_id","codes"}` line each.
pub fn export_jsonl(states: &BTreeMap<String, RecordState>, range: &RecordRange) -> String {
    let mut out = String::new();
    for (record_id, state) in states {
        if !state.finalized || !range.contains(record_id) {
            continue;
        }
        let line = ExportLine {
            record_id,
            codes: &state.codes,
        };
        out.push_str(&serde_json::to_string(&line).expect("export line serializes"));
        out.push('\n');
    }
    out
}

pub struct EventLog {
    path: PathBuf,
    file: File,
    /// Bytes of complete lines on disk.
    len: u64,
    events: Vec<DecisionEvent>,
}

impl EventLog {
    /// Opens or creates the log, dropping a torn final line.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let io = |e: std::io::Error| ServiceError::Io(format!("{}: {e}", path.display()));
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;

        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            tracing::warn!(path = %path.display(), dropped = bytes.len() - complete, "truncating torn log line");
            file.set_len(complete as u64).map_err(io)?;
            file.sync_data().map_err(io)?;
        }

        let text = std::str::from_utf8(&bytes[..complete])
            .map_err(|e| ServiceError::Corrupt(format!("{}: {e}", path.display())))?;
        let mut events: Vec<DecisionEvent> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let event: DecisionEvent = serde_json::from_str(line)
                .map_err(|e| ServiceError::Corrupt(format!("{} line {}: {e}", path.display(), n + 1)))?;
            if let Some(last) = events.last() {
                if event.event_id <= last.event_id {
                    return Err(ServiceError::Corrupt(format!(
                        "{} line {}: event id {} does not increase",
                        path.display(),
                        n + 1,
                        event.event_id
                    )));
                }
            }
            events.push(event);
        }
        Ok(EventLog {
            path: path.to_path_buf(),
            file,
            len: complete as u64,
            events,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn events(&self) -> &[DecisionEvent] {
        &self.events
    }

    pub fn last_id(&self) -> Option<u64> {
        self.events.last().map(|e| e.event_id)
    }

    pub fn find(&self, event_id: u64) -> Option<&DecisionEvent> {
        self.events
            .binary_search_by_key(&event_id, |e| e.event_id)
            .ok()
            .map(|i| &self.events[i])
    }

    /// Writes and syncs one line. The id must exceed every stored id.
    pub fn append(&mut self, event: DecisionEvent) -> Result<&DecisionEvent, ServiceError> {
        if self.last_id().is_some_and(|last| event.event_id <= last) {
            return Err(ServiceError::Conflict(format!(
                "event id {} is not greater than the last stored id",
                event.event_id
            )));
        }
        let mut line = serde_json::to_vec(&event).expect("event serializes");
        line.push(b'\n');
        let io = |e: std::io::Error| ServiceError::Io(format!("{}: {e}", self.path.display()));
        if let Err(e) = self.file.write_all(&line).and_then(|_| self.file.sync_data()) {
            // Cut off whatever part of the line was written so the next
            // append does not land on a partial line.
            let _ = self.file.set_len(self.len);
            return Err(io(e));
        }
        self.len += line.len() as u64;
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }
}
