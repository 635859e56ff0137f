use std::collections::BTreeMap;
use std::sync::{Arc, MutexGuard};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dxcode_core::corpus::{build_input, Section};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::event_log::RecordRange;
use crate::store::{DecisionRequest, DecisionStore, Status};
use crate::{AppState, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind(), "message": self.to_string()}});
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/suggest", post(suggest))
        .route("/records", get(records))
        .route("/decisions", post(decisions))
        .route("/export", get(export))
        .route("/search", get(search))
        .route("/health", get(health))
        .fallback(|| async { ServiceError::NotFound("no such route".into()) })
        .with_state(state)
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))
}

fn parse_query<T>(query: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    query
        .map(|Query(q)| q)
        .map_err(|e| ServiceError::BadRequest(e.body_text()))
}

fn lock(state: &AppState) -> ApiResult<MutexGuard<'_, DecisionStore>> {
    state
        .store
        .lock()
        .map_err(|_| ServiceError::Internal("decision store lock poisoned".into()))
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuggestRequest {
    text: String,
    #[serde(default)]
    top_k: Option<usize>,
    #[serde(default)]
    threshold: Option<f64>,
}

async fn suggest(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let request: SuggestRequest = parse_body(&body)?;
    blocking(move || {
        let suggester = state
            .suggester
            .as_ref()
            .ok_or_else(|| ServiceError::Unavailable("no model loaded".into()))?;
        let suggestions = suggester.suggest(
            &request.text,
            request.top_k.unwrap_or(state.settings.top_k),
            request.threshold.unwrap_or(state.settings.threshold),
        )?;
        Ok(Json(json!({ "suggestions": suggestions })).into_response())
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordsQuery {
    #[serde(default)]
    status: Option<Status>,
}

#[derive(Debug, Serialize)]
struct RecordView<'a> {
    record_id: &'a str,
    sections: &'a BTreeMap<Section, String>,
    /// Cleaned model input built from the configured fields.
    input: String,
    /// Current replayed code set.
    codes: Vec<String>,
}

async fn records(
    State(state): State<Arc<AppState>>,
    query: Result<Query<RecordsQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let status = parse_query(query)?.status.unwrap_or(Status::Pending);
    let store = lock(&state)?;
    let mut views = Vec::new();
    for (record, record_state) in store.records(status) {
        views.push(RecordView {
            record_id: &record.record_id,
            sections: &record.sections,
            input: build_input(record, &state.settings.fields).map_err(|e| ServiceError::Internal(e.to_string()))?,
            codes: record_state.codes.into_iter().collect(),
        });
    }
    Ok(Json(json!({ "status": status, "records": views })).into_response())
}

async fn decisions(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let request: DecisionRequest = parse_body(&body)?;
    blocking(move || {
        let ack = lock(&state)?.record(request)?;
        Ok(Json(ack).into_response())
    })
    .await
}

async fn export(
    State(state): State<Arc<AppState>>,
    query: Result<Query<RecordRange>, QueryRejection>,
) -> ApiResult<Response> {
    let range = parse_query(query)?;
    let body = lock(&state)?.export(&range);
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchQuery {
    #[serde(default)]
    q: String,
    #[serde(default)]
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SearchHit {
    code: String,
    term: String,
}

async fn search(
    State(state): State<Arc<AppState>>,
    query: Result<Query<SearchQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let query = parse_query(query)?;
    let graph = state
        .graph
        .as_ref()
        .ok_or_else(|| ServiceError::Unavailable("no terminology loaded".into()))?;
    let results: Vec<SearchHit> = graph
        .search(&query.q, query.limit.unwrap_or(20))
        .into_iter()
        .map(|(code, term)| SearchHit { code, term })
        .collect();
    Ok(Json(json!({ "results": results })).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let store = lock(&state)?;
    Ok(Json(json!({
        "status": "ok",
        "model_loaded": state.suggester.is_some(),
        "terminology_loaded": state.graph.is_some(),
        "records": store.queue_len(),
        "events": store.events().len(),
    }))
    .into_response())
}
