//! Admin HTTP gateway: node status, ledger view, task submission, and manual
//! registration of externally signed records.

use std::sync::Arc;

use agora_core::events::Event;
use agora_core::ledger::AgentRecord;
use agora_core::planning::{PlanningError, TaskDescription};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::node::{NodeInner, SubmitError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub text: String,
    #[serde(default)]
    pub options: Option<Vec<String>>,
    #[serde(default)]
    pub chains: Option<usize>,
    #[serde(default)]
    pub task_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub record: AgentRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    task_id: Option<String>,
}

pub const DEFAULT_CHAINS: usize = 3;

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

pub(crate) fn router(node: Arc<NodeInner>) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/ledger", get(ledger))
        .route("/events", get(events))
        .route("/submit", post(submit))
        .route("/register", post(register))
        .with_state(node)
}

async fn status(State(node): State<Arc<NodeInner>>) -> Response {
    Json(node.status()).into_response()
}

async fn ledger(State(node): State<Arc<NodeInner>>) -> Response {
    let snapshot = node.ledger().snapshot();
    let records: Vec<_> = snapshot.records.values().cloned().collect();
    Json(records).into_response()
}

async fn events(State(node): State<Arc<NodeInner>>, Query(q): Query<EventsQuery>) -> Response {
    let events: Vec<Event> = match q.task_id {
        Some(t) => node.event_log().events_for(&t),
        None => node.event_log().events(),
    };
    Json(events).into_response()
}

async fn submit(State(node): State<Arc<NodeInner>>, Json(req): Json<SubmitRequest>) -> Response {
    let task = TaskDescription {
        task_id: req
            .task_id
            .unwrap_or_else(|| format!("task-{:016x}", rand::random::<u64>())),
        text: req.text,
        options: req.options,
    };
    if let Err(e) = task.validate() {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    match node.submit(task, req.chains.unwrap_or(DEFAULT_CHAINS)).await {
        Ok(outcome) => Json(outcome).into_response(),
        Err(SubmitError::Planning(e @ PlanningError::InvalidTask(_))) => {
            error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Err(e) => error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
    }
}

async fn register(State(node): State<Arc<NodeInner>>, Json(req): Json<RegisterRequest>) -> Response {
    match node.ledger().register(req.record).await {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}
