//! Operator HTTP API.
//!
//! | method | path                        | body / query                  |
//! |--------|-----------------------------|-------------------------------|
//! | GET    | /nodes                      |                               |
//! | GET    | /nodes/{id}                 |                               |
//! | GET    | /nodes/{id}/history         | `from`, `to` (ms, `to` excl.) |
//! | PUT    | /nodes/{id}/thresholds      | [`ThresholdUpdate`]           |
//! | GET    | /map                        | GeoJSON                       |
//! | GET    | /alerts                     | `active=true\|false`          |
//! | POST   | /alerts/{id}/ack            | `{"operator_id": ...}`        |
//! | GET    | /alerts/stream              | SSE, honours `Last-Event-ID`  |
//! | GET    | /transitions                |                               |
//!
//! Errors come back as `{"error": ..., "violations"?: [...]}`.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::json;
use wlds_core::model::NodeId;

use crate::events::{BusEvent, Subscription, RESYNC_EVENT};
use crate::service::{AckError, Service, ThresholdError, ThresholdUpdate};

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/nodes", get(list_nodes))
        .route("/nodes/{id}", get(get_node))
        .route("/nodes/{id}/history", get(history))
        .route("/nodes/{id}/thresholds", put(put_thresholds))
        .route("/map", get(map))
        .route("/alerts", get(list_alerts))
        .route("/alerts/stream", get(stream_alerts))
        .route("/alerts/{id}/ack", post(ack))
        .route("/transitions", get(transitions))
        .with_state(service)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn parse_node(id: &str) -> Result<NodeId, Response> {
    id.parse()
        .map_err(|_| error(StatusCode::NOT_FOUND, format!("unknown node {id}")))
}

async fn list_nodes(State(s): State<Arc<Service>>) -> Response {
    Json(s.snapshots()).into_response()
}

async fn get_node(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    let node = match parse_node(&id) {
        Ok(n) => n,
        Err(r) => return r,
    };
    match s.snapshot(&node) {
        Some(snap) => Json(snap).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown node {id}")),
    }
}

#[derive(Debug, Deserialize)]
struct HistoryQuery {
    from: Option<u64>,
    to: Option<u64>,
}

async fn history(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<HistoryQuery>,
) -> Response {
    let node = match parse_node(&id) {
        Ok(n) => n,
        Err(r) => return r,
    };
    let (from, to) = (q.from.unwrap_or(0), q.to.unwrap_or(u64::MAX));
    let svc = Arc::clone(&s);
    let res = tokio::task::spawn_blocking(move || svc.history(&node, from, to)).await;
    match res {
        Ok(Ok(Some(records))) => Json(records).into_response(),
        Ok(Ok(None)) => error(StatusCode::NOT_FOUND, format!("unknown node {id}")),
        Ok(Err(e @ wlds_store::StoreError::InvertedRange { .. })) => {
            error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn put_thresholds(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Result<Json<ThresholdUpdate>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let node = match parse_node(&id) {
        Ok(n) => n,
        Err(r) => return r,
    };
    let Json(update) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let svc = Arc::clone(&s);
    let res = tokio::task::spawn_blocking(move || svc.update_thresholds(&node, &update)).await;
    match res {
        Ok(Ok(snap)) => Json(snap).into_response(),
        Ok(Err(ThresholdError::UnknownNode)) => {
            error(StatusCode::NOT_FOUND, format!("unknown node {id}"))
        }
        Ok(Err(ThresholdError::Invalid(v))) => {
            let message = ThresholdError::Invalid(v.clone()).to_string();
            (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": message, "violations": v })),
            )
                .into_response()
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn map(State(s): State<Arc<Service>>) -> Response {
    (
        [("content-type", "application/geo+json")],
        Json(s.map_document()),
    )
        .into_response()
}

#[derive(Debug, Deserialize)]
struct AlertsQuery {
    active: Option<bool>,
}

async fn list_alerts(
    State(s): State<Arc<Service>>,
    q: Result<Query<AlertsQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    match q {
        Ok(Query(q)) => Json(s.alerts(q.active)).into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, e.body_text()),
    }
}

#[derive(Debug, Deserialize)]
struct AckBody {
    operator_id: String,
}

async fn ack(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Result<Json<AckBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let svc = Arc::clone(&s);
    let res = tokio::task::spawn_blocking(move || svc.acknowledge(&id, &body.operator_id)).await;
    match res {
        Ok(Ok(rec)) => Json(rec).into_response(),
        Ok(Err(e @ AckError::NotFound)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Ok(Err(e @ (AckError::AlreadyAcked(_) | AckError::Cleared))) => {
            error(StatusCode::CONFLICT, e.to_string())
        }
        Ok(Err(e @ AckError::EmptyOperator)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn transitions(State(s): State<Arc<Service>>) -> Response {
    Json(s.transitions()).into_response()
}

fn to_sse(e: BusEvent) -> Event {
    Event::default()
        .id(e.event_id.to_string())
        .event(e.kind)
        .data(e.data.to_string())
}

fn resync() -> Event {
    Event::default()
        .event(RESYNC_EVENT)
        .data(r#"{"reason":"resync required"}"#)
}

/// Backlog, then live events; ends with a resync event if the subscriber
/// fell too far behind.
pub fn event_stream(mut sub: Subscription) -> impl Stream<Item = Result<Event, Infallible>> {
    if sub.resync_required {
        return stream::iter(vec![Ok(resync())]).left_stream();
    }
    let backlog = std::mem::take(&mut sub.backlog);
    let backlog = stream::iter(backlog.into_iter().map(|e| Ok(to_sse(e))));
    let live = stream::unfold(Some(sub), |state| async move {
        let mut sub = state?;
        match sub.live.recv().await {
            Some(e) => Some((Ok(to_sse(e)), Some(sub))),
            None => sub.overflowed().then(|| (Ok(resync()), None)),
        }
    });
    backlog.chain(live).right_stream()
}

async fn stream_alerts(State(s): State<Arc<Service>>, headers: HeaderMap) -> Response {
    let last = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let sub = s.bus().subscribe(last);
    Sse::new(event_stream(sub))
        .keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
        .into_response()
}
