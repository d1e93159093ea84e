use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Hub, InboundError};
use crate::config::Layer;
use crate::context::{ContextError, SwitchCause};
use crate::engine::EngineError;
use crate::message::payload::RecordAction;
use crate::message::decode_envelope;
use crate::recording::{list_sessions, replay, RecordError, ReplayError, ReplayMode, ReplayOptions};

pub(super) fn routes() -> Router<Arc<Hub>> {
    Router::new()
        .route("/api/services", get(services))
        .route("/api/services/active", post(set_active))
        .route("/api/context", get(context))
        .route("/api/clients", get(clients))
        .route("/api/metrics", get(metrics))
        .route("/api/sessions", get(sessions))
        .route("/api/record", post(record))
        .route("/api/replay", post(replay_session))
        .route("/api/inject", post(inject))
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn engine_status(e: &EngineError) -> StatusCode {
    match e {
        EngineError::Context(ContextError::UnknownService(_)) | EngineError::UnknownComponent(_) => {
            StatusCode::NOT_FOUND
        }
        EngineError::EngineStopped | EngineError::NotStarted => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::BAD_REQUEST,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ServiceStatus {
    pub name: String,
    pub active: bool,
}

fn service_list(hub: &Hub) -> Vec<ServiceStatus> {
    let ctx = hub.kernel.engine.context();
    if ctx.services.is_empty() {
        // no switching rules: every service-layer component runs
        return hub
            .kernel
            .engine
            .config()
            .names_in_layer(Layer::Service)
            .map(|n| ServiceStatus { name: n.to_string(), active: true })
            .collect();
    }
    ctx.services
        .iter()
        .map(|s| ServiceStatus { name: s.clone(), active: ctx.active.as_deref() == Some(s.as_str()) })
        .collect()
}

async fn services(State(hub): State<Arc<Hub>>) -> Json<Vec<ServiceStatus>> {
    Json(service_list(&hub))
}

#[derive(Deserialize)]
struct ActiveRequest {
    name: Option<String>,
}

async fn set_active(State(hub): State<Arc<Hub>>, Json(req): Json<ActiveRequest>) -> ApiResult<Vec<ServiceStatus>> {
    let target = req.name.filter(|n| !matches!(n.as_str(), "" | "idle" | "none"));
    let h = hub.clone();
    tokio::task::spawn_blocking(move || h.kernel.engine.switch_service(target.as_deref(), SwitchCause::Explicit))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError(engine_status(&e), e.to_string()))?;
    Ok(Json(service_list(&hub)))
}

async fn context(State(hub): State<Arc<Hub>>) -> Json<Value> {
    Json(serde_json::to_value(hub.kernel.engine.context()).unwrap_or(Value::Null))
}

async fn clients(State(hub): State<Arc<Hub>>) -> Json<Value> {
    Json(serde_json::to_value(hub.clients()).unwrap_or(Value::Null))
}

async fn metrics(State(hub): State<Arc<Hub>>) -> Json<Value> {
    Json(json!({
        "engine": hub.kernel.engine.snapshot_metrics(),
        "transport": hub.metrics_snapshot(),
    }))
}

async fn sessions(State(hub): State<Arc<Hub>>) -> Json<Value> {
    Json(serde_json::to_value(list_sessions(&hub.kernel.record_dir)).unwrap_or(Value::Null))
}

#[derive(Deserialize)]
struct RecordRequest {
    action: RecordAction,
}

async fn record(State(hub): State<Arc<Hub>>, Json(req): Json<RecordRequest>) -> ApiResult<Value> {
    let h = hub.clone();
    let result = tokio::task::spawn_blocking(move || match req.action {
        RecordAction::Start => h.kernel.recorder.start_session(&h.kernel.engine),
        RecordAction::Stop => h.kernel.recorder.stop_session(),
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match result {
        Ok(meta) => Ok(Json(serde_json::to_value(meta).unwrap_or(Value::Null))),
        Err(e @ (RecordError::SessionActive(_) | RecordError::NoActiveSession)) => {
            Err(ApiError(StatusCode::CONFLICT, e.to_string()))
        }
        Err(e) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

#[derive(Deserialize)]
struct ReplayRequest {
    session: String,
    #[serde(default = "one")]
    speed: f64,
    #[serde(default)]
    mode: Option<ReplayMode>,
}

fn one() -> f64 {
    1.0
}

async fn replay_session(State(hub): State<Arc<Hub>>, Json(req): Json<ReplayRequest>) -> ApiResult<Value> {
    let opts = ReplayOptions { speed: req.speed, mode: req.mode.unwrap_or(ReplayMode::Timed) };
    let h = hub.clone();
    let result = tokio::task::spawn_blocking(move || replay(&h.kernel.record_dir, &req.session, &h.kernel.engine, opts))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match result {
        Ok(report) => Ok(Json(serde_json::to_value(report).unwrap_or(Value::Null))),
        Err(e) => {
            let status = match &e {
                ReplayError::UnknownSession(_) => StatusCode::NOT_FOUND,
                ReplayError::InvalidSpeed(_) => StatusCode::BAD_REQUEST,
                ReplayError::NotSealed(_) | ReplayError::IncompatiblePipeline { .. } => StatusCode::CONFLICT,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            Err(ApiError(status, e.to_string()))
        }
    }
}

async fn inject(State(hub): State<Arc<Hub>>, body: Bytes) -> ApiResult<Value> {
    let env = decode_envelope(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let h = hub.clone();
    let outcome = tokio::task::spawn_blocking(move || h.handle_inbound(env, None))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match outcome {
        Ok(o) => Ok(Json(serde_json::to_value(o).unwrap_or(Value::Null))),
        Err(InboundError::Engine(e)) => Err(ApiError(engine_status(&e), e.to_string())),
        Err(e @ InboundError::NoInput(_)) => Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())),
        Err(e) => Err(ApiError(StatusCode::BAD_REQUEST, e.to_string())),
    }
}
