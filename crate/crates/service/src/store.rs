//! Review queue and decision bookkeeping over the event log.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use dxcode_core::corpus::{ClinicalRecord, Inventory};
use serde::{Deserialize, Serialize};

use crate::event_log::{apply, export_jsonl, replay, Action, DecisionEvent, EventLog, RecordRange, RecordState};
use crate::ServiceError;

/// Body of `POST /decisions`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub record_id: String,
    pub action: Action,
    #[serde(default)]
    pub code: Option<String>,
    pub event_id: u64,
    pub actor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub event_id: u64,
    pub record_id: String,
    pub timestamp_ms: u64,
    /// True when the id was already stored with the same payload.
    pub duplicate: bool,
    pub finalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Finalized,
}

pub struct DecisionStore {
    log: EventLog,
    queue: Vec<ClinicalRecord>,
    positions: HashMap<String, usize>,
    inventory: Inventory,
    states: BTreeMap<String, RecordState>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl DecisionStore {
    /// `queue` is the review order; decisions may only name these records.
    pub fn open(log_path: &Path, queue: Vec<ClinicalRecord>, inventory: Inventory) -> Result<Self, ServiceError> {
        let log = EventLog::open(log_path)?;
        let states = replay(log.events());
        let mut positions = HashMap::with_capacity(queue.len());
        for (i, record) in queue.iter().enumerate() {
            if positions.insert(record.record_id.clone(), i).is_some() {
                return Err(ServiceError::Validation(format!(
                    "record `{}` appears twice in the review queue",
                    record.record_id
                )));
            }
        }
        Ok(DecisionStore {
            log,
            queue,
            positions,
            inventory,
            states,
        })
    }

    pub fn events(&self) -> &[DecisionEvent] {
        self.log.events()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn state(&self, record_id: &str) -> RecordState {
        self.states.get(record_id).cloned().unwrap_or_default()
    }

    /// Queue records with the given status, in queue order.
    pub fn records(&self, status: Status) -> Vec<(&ClinicalRecord, RecordState)> {
        self.queue
            .iter()
            .map(|r| (r, self.state(&r.record_id)))
            .filter(|(_, s)| s.finalized == (status == Status::Finalized))
            .collect()
    }

    /// Checks run in a fixed order: a resent event is acknowledged again
    /// before any other rule can reject it.
    pub fn record(&mut self, request: DecisionRequest) -> Result<Ack, ServiceError> {
        if let Some(stored) = self.log.find(request.event_id) {
            let candidate = DecisionEvent {
                event_id: request.event_id,
                record_id: request.record_id.clone(),
                timestamp_ms: stored.timestamp_ms,
                action: request.action,
                code: request.code.clone(),
                actor: request.actor.clone(),
            };
            if !stored.same_payload(&candidate) {
                return Err(ServiceError::Conflict(format!(
                    "event id {} was already used for a different decision",
                    request.event_id
                )));
            }
            return Ok(Ack {
                event_id: stored.event_id,
                record_id: stored.record_id.clone(),
                timestamp_ms: stored.timestamp_ms,
                duplicate: true,
                finalized: self.state(&stored.record_id).finalized,
            });
        }
        if let Some(last) = self.log.last_id() {
            if request.event_id <= last {
                return Err(ServiceError::Conflict(format!(
                    "event id {} is not greater than the last stored id {last}",
                    request.event_id
                )));
            }
        }
        if !self.positions.contains_key(&request.record_id) {
            return Err(ServiceError::NotFound(format!("record `{}`", request.record_id)));
        }
        if request.actor.trim().is_empty() {
            return Err(ServiceError::Validation("actor must not be empty".into()));
        }
        match (request.action, &request.code) {
            (Action::Finalize, Some(_)) => {
                return Err(ServiceError::Validation("finalize takes no code".into()));
            }
            (Action::Finalize, None) => {}
            (action, None) => {
                return Err(ServiceError::Validation(format!("{} requires a code", action.as_str())));
            }
            (_, Some(code)) if !self.inventory.contains(code) => {
                return Err(ServiceError::Validation(format!("code `{code}` is not in the inventory")));
            }
            _ => {}
        }
        if self.state(&request.record_id).finalized {
            return Err(ServiceError::Conflict(format!(
                "record `{}` is already finalized",
                request.record_id
            )));
        }

        let event = DecisionEvent {
            event_id: request.event_id,
            record_id: request.record_id,
            timestamp_ms: now_ms(),
            action: request.action,
            code: request.code,
            actor: request.actor,
        };
        let stored = self.log.append(event)?.clone();
        apply(&mut self.states, &stored);
        Ok(Ack {
            event_id: stored.event_id,
            finalized: self.state(&stored.record_id).finalized,
            record_id: stored.record_id,
            timestamp_ms: stored.timestamp_ms,
            duplicate: false,
        })
    }

    pub fn export(&self, range: &RecordRange) -> String {
        export_jsonl(&self.states, range)
    }
}
