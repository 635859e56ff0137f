//! Code-suggestion service for human review of model output.
//!
//! Coders fetch pending records, ask for ranked suggestions, post
//! accept/reject/augment/finalize decisions and export finalized visits.
//! Every decision lands in an append-only JSONL log, and all state the
//! service reports is a replay of that log.
//!
//! | Route | Body / query | Response |
//! |---|---|---|
//! | `POST /suggest` | `{text, top_k?, threshold?}` | `{suggestions:[{code, term, probability, above_threshold}]}` |
//! | `GET /records` | `?status=pending\|finalized` | `{status, records:[{record_id, sections, input, codes}]}` |
//! | `POST /decisions` | `{record_id, action, code?, event_id, actor}` | `{event_id, record_id, timestamp_ms, duplicate, finalized}` |
//! | `GET /export` | `?from=&to=` | JSONL, one `{record_id, codes}` per finalized record |
//! | `GET /search` | `?q=&limit=` | `{results:[{code, term}]}` |
//! | `GET /health` | | `{status, model_loaded, terminology_loaded, records, events}` |
//!
//! Errors are `{"error":{"kind","message"}}` with `kind` one of
//! `bad_request` (400), `not_found` (404), `conflict` (409), `validation`
//! (422), `unavailable` (503) or `internal` (500).

pub mod event_log;
mod routes;
pub mod store;
pub mod suggest;

use std::sync::{Arc, Mutex};

use axum::http::StatusCode;
use dxcode_core::corpus::Section;
use dxcode_core::terminology::ConceptGraph;

pub use event_log::{replay, Action, DecisionEvent, EventLog, RecordRange, RecordState};
pub use routes::router;
pub use store::{Ack, DecisionRequest, DecisionStore, Status};
pub use suggest::{Suggester, Suggestion};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("corrupt event log: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation(_) => "validation",
            ServiceError::Unavailable(_) => "unavailable",
            ServiceError::Io(_) | ServiceError::Corrupt(_) | ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Io(_) | ServiceError::Corrupt(_) | ServiceError::Internal(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSettings {
    pub threshold: f64,
    pub top_k: usize,
    /// Sections joined into a record's `input` for `GET /records`.
    pub fields: Vec<Section>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            threshold: 0.5,
            top_k: 20,
            fields: vec![Section::Diagnosis, Section::Assessment],
        }
    }
}

/// Everything the handlers share. The model and terminology are read-only;
/// the store's mutex is the single writer for the log.
pub struct AppState {
    pub suggester: Option<Suggester>,
    pub graph: Option<ConceptGraph>,
    pub store: Mutex<DecisionStore>,
    pub settings: ServiceSettings,
}

impl AppState {
    pub fn new(
        suggester: Option<Suggester>,
        graph: Option<ConceptGraph>,
        store: DecisionStore,
        settings: ServiceSettings,
    ) -> Arc<Self> {
        Arc::new(AppState {
            suggester,
            graph,
            store: Mutex::new(store),
            settings,
        })
    }
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
