use std::convert::Infallible;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dlcf_core::orchestrator::{Decision, DecisionError};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use crate::{AppState, API_SCHEMA_VERSION};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/policies", get(get_policies))
        .route("/api/evaluations/latest", get(latest_evaluation))
        .route("/api/runs/{id}/summary", get(run_summary))
        .route("/api/verifications/pending", get(pending))
        .route("/api/verifications/{id}/decision", post(decide))
        .route("/api/stream", get(stream))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

fn error(status: StatusCode, code: &str, reason: impl Into<String>) -> Response {
    let body = json!({
        "schema_version": API_SCHEMA_VERSION,
        "error": code,
        "reason": reason.into(),
    });
    (status, Json(body)).into_response()
}

/// `body` with `schema_version` added at the top level.
fn versioned(body: impl serde::Serialize) -> Response {
    let mut v = serde_json::to_value(body).unwrap_or(Value::Null);
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("schema_version".into(), json!(API_SCHEMA_VERSION));
        }
        None => v = json!({ "schema_version": API_SCHEMA_VERSION, "value": v }),
    }
    Json(v).into_response()
}

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

async fn auth(State(app): State<AppState>, Query(q): Query<TokenQuery>, req: Request, next: Next) -> Response {
    let Some(expected) = app.cfg.token.as_deref() else {
        return next.run(req).await;
    };
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|h| h.to_str().ok())
        .and_then(|h| h.strip_prefix("Bearer "));
    let query = (req.uri().path() == "/api/stream").then_some(q.token.as_deref()).flatten();
    if bearer == Some(expected) || query == Some(expected) {
        next.run(req).await
    } else {
        error(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
    }
}

async fn get_state(State(app): State<AppState>) -> Response {
    match app.hub.state() {
        Some(s) => versioned(s),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "not_ready", "the loop has not completed a step"),
    }
}

async fn get_policies(State(app): State<AppState>) -> Response {
    versioned(json!({ "policies": app.hub.policies() }))
}

async fn latest_evaluation(State(app): State<AppState>) -> Response {
    match app.hub.latest_evaluation() {
        Some(e) => versioned(e),
        None => error(StatusCode::NOT_FOUND, "not_found", "no evaluation yet"),
    }
}

fn plain_name(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

async fn run_summary(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    if id == app.hub.run_id() {
        if let Some(s) = app.hub.summary() {
            return versioned(s);
        }
    }
    let file = app
        .cfg
        .runs_dir
        .as_ref()
        .filter(|_| plain_name(&id))
        .map(|d| d.join(&id).join("summary.json"));
    let text = match file {
        Some(f) => tokio::fs::read_to_string(f).await.ok(),
        None => None,
    };
    match text.and_then(|t| serde_json::from_str::<Value>(&t).ok()) {
        Some(v) => versioned(v),
        None => error(StatusCode::NOT_FOUND, "not_found", format!("no summary for run `{id}`")),
    }
}

async fn pending(State(app): State<AppState>) -> Response {
    versioned(json!({ "pending": app.hub.pending() }))
}

fn decision_error(e: DecisionError) -> Response {
    let status = match &e {
        DecisionError::NotPending { .. } => StatusCode::CONFLICT,
        DecisionError::Unknown { .. } => StatusCode::NOT_FOUND,
        DecisionError::Invalid { .. } | DecisionError::Rejected { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        DecisionError::Timeout => StatusCode::GATEWAY_TIMEOUT,
    };
    let mut body = serde_json::to_value(&e).unwrap_or_else(|_| json!({}));
    if let Some(obj) = body.as_object_mut() {
        obj.insert("schema_version".into(), json!(API_SCHEMA_VERSION));
        obj.insert("reason".into(), json!(e.to_string()));
    }
    (status, Json(body)).into_response()
}

async fn decide(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let Ok(id) = id.parse::<u64>() else {
        return error(StatusCode::NOT_FOUND, "unknown", format!("unknown request {id}"));
    };
    let decision: Decision = match serde_json::from_slice(&body) {
        Ok(d) => d,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed", e.to_string()),
    };
    match app.hub.request(id) {
        None => return decision_error(DecisionError::Unknown { id }),
        Some(r) if !r.is_pending() => {
            return decision_error(DecisionError::NotPending {
                id,
                status: r.status.as_str().into(),
            })
        }
        Some(_) => {}
    }
    let Some(handle) = app.decisions.clone() else {
        return decision_error(DecisionError::Unknown { id });
    };
    let wait = app.cfg.decision_wait;
    let reply = tokio::task::spawn_blocking(move || handle.submit(id, decision, wait))
        .await
        .unwrap_or(Err(DecisionError::Timeout));
    match reply {
        Ok(req) => versioned(json!({ "request": req })),
        Err(e) => decision_error(e),
    }
}

async fn stream(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = app.hub.subscribe();
    let events = futures::stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Ok(ev) => {
                let data = serde_json::to_string(&ev).unwrap_or_default();
                let out = Event::default().event(ev.kind()).id(ev.seq.to_string()).data(data);
                Some((Ok(out), rx))
            }
            Err(RecvError::Lagged(n)) => {
                log::warn!("dropping a stream subscriber that fell {n} events behind");
                None
            }
            Err(RecvError::Closed) => None,
        }
    });
    let beat = Event::default()
        .event("heartbeat")
        .data(json!({ "schema_version": API_SCHEMA_VERSION, "type": "heartbeat" }).to_string());
    Sse::new(events).keep_alive(KeepAlive::new().interval(app.cfg.heartbeat).event(beat))
}
