//! HTTP API over [`ChatService`].
//!
//! | Method | Path | Body | Response |
//! |---|---|---|---|
//! | POST | `/v1/sessions` | [`SamplerOverrides`] (all optional) | 201 [`CreatedSession`] |
//! | POST | `/v1/sessions/{id}/messages` | [`PostMessage`] | `text/event-stream` |
//! | GET | `/v1/sessions/{id}` | | [`SessionView`] |
//! | GET | `/v1/metrics` | | [`ServiceMetrics`] |
//! | GET | `/v1/health` | | [`Health`] |
//!
//! The message stream sends one `token` event per text delta, with a
//! [`TokenEvent`] JSON payload, then a single `done` event carrying a
//! [`DoneEvent`]. A failure after the stream opened ends it with an `error`
//! event. Errors before that are JSON [`ApiError`] bodies with status 400
//! (validation, naming the field) or 404 (unknown session).

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use uuid::Uuid;

use super::metrics::ServiceMetrics;
use super::{ChatService, Reply, SamplerOverrides, ServiceError, SessionView, TokenEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: Uuid,
    pub sampler: nglm_core::sampler::SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostMessage {
    pub text: String,
    /// Include the designed prompt in the `done` event.
    #[serde(default)]
    pub debug: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneEvent {
    #[serde(flatten)]
    pub reply: Reply,
    pub metrics: ServiceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model: String,
    pub sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, field) = match &self {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, None),
            ServiceError::Invalid { field, .. } => (StatusCode::BAD_REQUEST, Some(field.clone())),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        let body = ApiError {
            error: self.to_string(),
            field,
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(service: Arc<ChatService>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/metrics", get(metrics))
        .route("/v1/health", get(health))
        .with_state(service)
}

fn parse_id(raw: &str) -> Result<Uuid, ServiceError> {
    raw.parse().map_err(|_| ServiceError::Invalid {
        field: "id".into(),
        message: "not a session id".into(),
    })
}

/// Accepts an empty body as "no overrides".
async fn create_session(
    State(svc): State<Arc<ChatService>>,
    body: axum::body::Bytes,
) -> Result<(StatusCode, Json<CreatedSession>), ServiceError> {
    let overrides: SamplerOverrides = if body.iter().all(u8::is_ascii_whitespace) {
        SamplerOverrides::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ServiceError::Invalid {
            field: "body".into(),
            message: e.to_string(),
        })?
    };
    let id = svc.create_session(&overrides)?;
    let sampler = svc.session_view(id)?.sampler;
    Ok((StatusCode::CREATED, Json(CreatedSession { session_id: id, sampler })))
}

async fn get_session(State(svc): State<Arc<ChatService>>, Path(id): Path<String>) -> Result<Json<SessionView>, ServiceError> {
    Ok(Json(svc.session_view(parse_id(&id)?)?))
}

async fn metrics(State(svc): State<Arc<ChatService>>) -> Json<ServiceMetrics> {
    Json(svc.metrics())
}

async fn health(State(svc): State<Arc<ChatService>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model: svc.model().kind().into(),
        sessions: svc.session_count(),
    })
}

enum Outgoing {
    Token(TokenEvent),
    Done(Box<DoneEvent>),
    Failed(String),
}

fn to_event(o: Outgoing) -> Event {
    let (name, data) = match o {
        Outgoing::Token(t) => ("token", serde_json::to_string(&t)),
        Outgoing::Done(d) => ("done", serde_json::to_string(&d)),
        Outgoing::Failed(msg) => ("error", serde_json::to_string(&ApiError { error: msg, field: None })),
    };
    Event::default().event(name).data(data.expect("events serialize"))
}

async fn post_message(
    State(svc): State<Arc<ChatService>>,
    Path(id): Path<String>,
    Json(body): Json<PostMessage>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ServiceError> {
    let id = parse_id(&id)?;
    if !svc.contains(id) {
        return Err(ServiceError::NotFound(id));
    }
    if body.text.trim().is_empty() {
        return Err(ServiceError::Invalid {
            field: "text".into(),
            message: "must not be empty".into(),
        });
    }
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::task::spawn_blocking(move || {
        let token_tx = tx.clone();
        let result = svc.post_message(id, &body.text, body.debug, |t| {
            let _ = token_tx.send(Outgoing::Token(t));
        });
        let last = match result {
            Ok(reply) => Outgoing::Done(Box::new(DoneEvent {
                reply,
                metrics: svc.metrics(),
            })),
            Err(e) => Outgoing::Failed(e.to_string()),
        };
        let _ = tx.send(last);
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let o = rx.recv().await?;
        Some((Ok(to_event(o)), rx))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

/// One parsed server-sent event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SseFrame {
    pub event: String,
    pub data: String,
}

/// Splits a complete `text/event-stream` body into frames, ignoring
/// comments (keep-alives).
pub fn parse_sse(body: &str) -> Vec<SseFrame> {
    let mut frames = Vec::new();
    for block in body.replace("\r\n", "\n").split("\n\n") {
        let mut event = String::from("message");
        let mut data: Vec<&str> = Vec::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                event = v.trim_start().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push(v.strip_prefix(' ').unwrap_or(v));
            }
        }
        if !data.is_empty() {
            frames.push(SseFrame {
                event,
                data: data.join("\n"),
            });
        }
    }
    frames
}
