//! HTTP/JSON API over a [`Gateway`].
//!
//! Every error body is `{"error": {"code": "...", "message": "..."}}`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, CompletionRequest, CompletionTransport, EmbeddingRequest, EmbeddingTransport, RetrievalRequest,
    RetrievalTransport, SourceDist,
};
use crate::datastore::DatastoreError;
use crate::orchestrator::{AnswerOptions, Gateway, GatewayError, LatencyBreakdown, RouteOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub question: String,
    #[serde(default)]
    pub tau_override: Option<f64>,
    #[serde(default)]
    pub force_source: Option<String>,
    #[serde(default)]
    pub return_transcript: bool,
}

impl AnswerRequest {
    fn options(&self) -> AnswerOptions {
        AnswerOptions {
            tau_override: self.tau_override,
            force_source: self.force_source.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub answer: String,
    pub selected: String,
    pub p_m: SourceDist,
    pub p_d: SourceDist,
    pub combined: SourceDist,
    pub latency: LatencyBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRequest {
    pub question: String,
    #[serde(default)]
    pub tau_override: Option<f64>,
    #[serde(default)]
    pub force_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub selected: String,
    pub p_m: SourceDist,
    pub p_d: SourceDist,
    pub combined: SourceDist,
    pub tau: f64,
    pub forced: bool,
    pub t_d: f64,
    pub warnings: Vec<String>,
}

impl From<RouteOutcome> for RouteResponse {
    fn from(r: RouteOutcome) -> Self {
        RouteResponse {
            selected: r.scores.selected,
            p_m: r.scores.p_m,
            p_d: r.scores.p_d,
            combined: r.scores.combined,
            tau: r.scores.tau,
            forced: r.forced,
            t_d: r.t_d,
            warnings: r.warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub count: usize,
    pub dim: usize,
    pub labels: IndexMap<String, usize>,
}

/// Either `key_text` (embedded by the service) or a raw `key` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsertRequest {
    #[serde(default)]
    pub key_text: Option<String>,
    #[serde(default)]
    pub key: Option<Vec<f32>>,
    pub label: String,
    #[serde(default)]
    pub meta: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsertResponse {
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": ErrorBody { code: self.code.into(), message: self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", r.body_text())
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let msg = e.to_string();
        match e {
            BackendError::Unavailable(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable", msg),
            BackendError::EmptyText | BackendError::InvalidRequest(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", msg)
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "backend_error", msg),
        }
    }
}

impl From<DatastoreError> for ApiError {
    fn from(e: DatastoreError) -> Self {
        let msg = e.to_string();
        match e {
            DatastoreError::Embedding(b) => b.into(),
            DatastoreError::UnknownLabel(_) => ApiError::new(StatusCode::BAD_REQUEST, "unknown_label", msg),
            DatastoreError::DimensionMismatch { .. } | DatastoreError::ZeroVector => {
                ApiError::new(StatusCode::BAD_REQUEST, "invalid_key", msg)
            }
            DatastoreError::UnknownId(_) => ApiError::new(StatusCode::NOT_FOUND, "unknown_id", msg),
            DatastoreError::EmptyStore => ApiError::new(StatusCode::NOT_FOUND, "empty_datastore", msg),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "datastore_error", msg),
        }
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let msg = e.to_string();
        match e {
            GatewayError::Backend(b) => b.into(),
            GatewayError::Datastore(d) => d.into(),
            GatewayError::UnknownSource(_) => ApiError::new(StatusCode::BAD_REQUEST, "unknown_source", msg),
            GatewayError::BadTau(_) => ApiError::new(StatusCode::BAD_REQUEST, "bad_tau", msg),
            GatewayError::EmptyQuestion => ApiError::new(StatusCode::BAD_REQUEST, "empty_question", msg),
            GatewayError::Selector(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

#[derive(Clone)]
struct AppState {
    gateway: Arc<Gateway>,
    save_path: Option<Arc<PathBuf>>,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

/// The gateway API. `save_path` enables `POST /v1/datastore/save`.
pub fn router(gateway: Arc<Gateway>, save_path: Option<PathBuf>) -> Router {
    let state = AppState {
        gateway,
        save_path: save_path.map(Arc::new),
    };
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/answer", post(answer))
        .route("/v1/route", post(route))
        .route("/v1/datastore/stats", get(stats))
        .route("/v1/datastore/entries", post(upsert))
        .route("/v1/datastore/entries/{id}", delete(remove))
        .route("/v1/datastore/export", get(export))
        .route("/v1/datastore/save", post(save))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn answer(
    State(s): State<AppState>,
    req: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Json<AnswerResponse>, ApiError> {
    let Json(req) = req?;
    let with_transcript = req.return_transcript;
    let r = blocking(move || Ok(s.gateway.answer_query(&req.question, &req.options())?)).await?;
    Ok(Json(AnswerResponse {
        answer: r.answer,
        selected: r.decision.selected,
        p_m: r.decision.p_m,
        p_d: r.decision.p_d,
        combined: r.decision.combined,
        latency: r.latency,
        transcript: with_transcript.then_some(r.transcript),
        warnings: r.warnings,
    }))
}

async fn route(
    State(s): State<AppState>,
    req: Result<Json<RouteRequest>, JsonRejection>,
) -> Result<Json<RouteResponse>, ApiError> {
    let Json(req) = req?;
    let opts = AnswerOptions {
        tau_override: req.tau_override,
        force_source: req.force_source,
    };
    let outcome = blocking(move || Ok(s.gateway.route(&req.question, &opts)?)).await?;
    Ok(Json(outcome.into()))
}

async fn stats(State(s): State<AppState>) -> Json<StatsResponse> {
    let store = s.gateway.store.snapshot();
    Json(StatsResponse {
        count: store.len(),
        dim: store.dim(),
        labels: store.label_histogram(),
    })
}

async fn upsert(
    State(s): State<AppState>,
    req: Result<Json<UpsertRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<UpsertResponse>), ApiError> {
    let Json(req) = req?;
    let id = blocking(move || {
        let g = &s.gateway;
        let id = match (&req.key_text, &req.key) {
            (Some(text), None) => g
                .store
                .update(|st| st.upsert_entry(text, &req.label, req.meta.clone(), &g.backends.embed))?,
            (None, Some(key)) => g
                .store
                .update(|st| st.insert_vector(key, &req.label, req.meta.clone()))?,
            _ => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "invalid_request",
                    "exactly one of key_text and key is required",
                ))
            }
        };
        Ok(id)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(UpsertResponse { id })))
}

async fn remove(State(s): State<AppState>, Path(id): Path<u64>) -> Result<StatusCode, ApiError> {
    s.gateway.store.update(|st| st.remove_entry(id))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn export(State(s): State<AppState>) -> Result<Response, ApiError> {
    let text = s.gateway.store.snapshot().export_text()?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response())
}

async fn save(State(s): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let Some(path) = s.save_path.clone() else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "no_datastore_path",
            "service was started without a datastore path",
        ));
    };
    let store = s.gateway.store.snapshot();
    let count = store.len();
    blocking(move || Ok(store.persist(&path)?)).await?;
    Ok(Json(serde_json::json!({ "saved": count })))
}

/// Serves the completion, embedding and retrieval wire protocol from local
/// transports, at `/complete`, `/embed` and `/retrieve`.
pub fn backend_router(
    llm: Arc<dyn CompletionTransport>,
    embed: Arc<dyn EmbeddingTransport>,
    retrieval: Arc<dyn RetrievalTransport>,
) -> Router {
    async fn run<T: Serialize + Send + 'static>(
        f: impl FnOnce() -> Result<T, BackendError> + Send + 'static,
    ) -> Result<Json<T>, ApiError> {
        let out = blocking(move || f().map_err(ApiError::from)).await?;
        Ok(Json(out))
    }
    Router::new()
        .route(
            "/complete",
            post(move |Json(req): Json<CompletionRequest>| run(move || llm.complete(&req))),
        )
        .route(
            "/embed",
            post(move |Json(req): Json<EmbeddingRequest>| run(move || embed.embed(&req))),
        )
        .route(
            "/retrieve",
            post(move |Json(req): Json<RetrievalRequest>| run(move || retrieval.retrieve(&req))),
        )
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(router: Router, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
