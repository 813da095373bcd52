use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::CorsLayer;

use super::{Service, ServiceError, SettingsJson};

struct ApiError(StatusCode, String);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::EmptyUtterance | ServiceError::Settings(_) | ServiceError::Eval(_) => StatusCode::BAD_REQUEST,
            ServiceError::NoVocabulary | ServiceError::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Parses a JSON body; an empty body means `T::default()`.
fn body<T: DeserializeOwned + Default>(bytes: &[u8]) -> Result<T, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("invalid JSON body: {e}")))
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRequest {
    utterance: String,
    #[serde(default)]
    settings: Option<SettingsJson>,
}

async fn create(
    State(svc): State<Arc<Service>>,
    raw: Bytes,
) -> Result<(StatusCode, Json<super::SessionInfo>), ApiError> {
    let settings: SettingsJson = body(&raw)?;
    Ok((StatusCode::CREATED, Json(svc.create_session(&settings)?)))
}

async fn turn(State(svc): State<Arc<Service>>, Path(id): Path<String>, raw: Bytes) -> ApiResult<super::DecodeResponse> {
    let req: TurnRequest = body(&raw)?;
    // Decoding is CPU-bound; keep it off the async workers.
    let out = tokio::task::spawn_blocking(move || svc.chat_turn(&id, &req.utterance, req.settings.as_ref()))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out))
}

async fn remove(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    svc.delete_session(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn healthz(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "sessions": svc.session_count() }))
}

async fn model(State(svc): State<Arc<Service>>) -> Json<super::ModelInfo> {
    Json(svc.model_info())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/turns", post(turn))
        .route("/sessions/{id}", delete(remove))
        .route("/healthz", get(healthz))
        .route("/model", get(model))
        .layer(CorsLayer::permissive())
        .with_state(service)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<Service>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
