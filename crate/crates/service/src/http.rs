//! JSON API over a shared [`Pipeline`].
//!
//! Emails are posted either as JSON `{"raw_base64": "...", "source": "...",
//! "received_at": 1712000000}` or as multipart form data with the message in a
//! field named `email`. Pipeline work runs on the blocking pool.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use pisco_core::cluster::{ClusterId, ClusterRecord, Label};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::pipeline::{Pipeline, StageError};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn bad_request(msg: impl ToString) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": { "stage": "request", "kind": "BadRequest", "message": msg.to_string() } }),
        }
    }

    fn not_found(msg: impl ToString) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            body: json!({ "error": { "stage": "cluster", "kind": "UnknownCluster", "message": msg.to_string() } }),
        }
    }
}

impl From<StageError> for ApiError {
    fn from(e: StageError) -> Self {
        let status = match (e.stage, e.kind) {
            (_, "UnknownCluster") => StatusCode::NOT_FOUND,
            (_, "DuplicateId") => StatusCode::CONFLICT,
            ("parse" | "rewrite", _) => StatusCode::UNPROCESSABLE_ENTITY,
            ("render", "FixtureMissing") => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            body: json!({ "error": {
                "stage": e.stage,
                "kind": e.kind,
                "tag": e.tag(),
                "message": e.message,
                "email_id": e.email_id,
            } }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct JsonEmail {
    raw_base64: String,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    received_at: Option<i64>,
}

/// A posted email in either accepted encoding.
struct EmailUpload {
    raw: Vec<u8>,
    source: String,
    received_at: Option<i64>,
}

impl<S: Send + Sync> FromRequest<S> for EmailUpload {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let ctype = req
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_ascii_lowercase();
        if ctype.starts_with("multipart/form-data") {
            let mut mp = Multipart::from_request(req, state)
                .await
                .map_err(|e| ApiError::bad_request(e.body_text()))?;
            let mut upload = None;
            let mut received_at = None;
            let mut source = None;
            while let Some(field) = mp.next_field().await.map_err(ApiError::bad_request)? {
                match field.name().unwrap_or("") {
                    "email" => {
                        let name = field.file_name().map(str::to_string);
                        let bytes = field.bytes().await.map_err(ApiError::bad_request)?;
                        upload = Some((bytes.to_vec(), name));
                    }
                    "received_at" => {
                        let t = field.text().await.map_err(ApiError::bad_request)?;
                        received_at = Some(t.trim().parse().map_err(ApiError::bad_request)?);
                    }
                    "source" => source = Some(field.text().await.map_err(ApiError::bad_request)?),
                    _ => {}
                }
            }
            let (raw, name) = upload.ok_or_else(|| ApiError::bad_request("missing multipart field \"email\""))?;
            Ok(Self {
                raw,
                source: source.or(name).unwrap_or_else(|| "http".into()),
                received_at,
            })
        } else {
            let Json(body) = Json::<JsonEmail>::from_request(req, state)
                .await
                .map_err(|e| ApiError::bad_request(e.body_text()))?;
            let raw = base64::engine::general_purpose::STANDARD
                .decode(body.raw_base64.trim())
                .map_err(|e| ApiError::bad_request(format!("raw_base64: {e}")))?;
            Ok(Self {
                raw,
                source: body.source.unwrap_or_else(|| "http".into()),
                received_at: body.received_at,
            })
        }
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("blocking task panicked")
}

async fn ingest(State(p): State<Arc<Pipeline>>, upload: EmailUpload) -> Result<Response, ApiError> {
    let fallback = upload.received_at.unwrap_or_else(|| chrono::Utc::now().timestamp());
    let out = blocking(move || p.ingest_email(&upload.raw, &upload.source, fallback)).await?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn score(State(p): State<Arc<Pipeline>>, upload: EmailUpload) -> Result<Response, ApiError> {
    let v = blocking(move || p.score_email(&upload.raw)).await?;
    Ok(Json(v).into_response())
}

#[derive(Debug, Deserialize)]
struct LabelBody {
    label: Label,
}

async fn label(
    State(p): State<Arc<Pipeline>>,
    Path(id): Path<ClusterId>,
    body: Result<Json<LabelBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let l = body.label;
    blocking(move || p.label_cluster(id, l)).await?;
    Ok(Json(json!({ "cluster_id": id, "label": l })).into_response())
}

#[derive(Debug, Serialize)]
struct ClusterSummary {
    cluster_id: ClusterId,
    size: usize,
    label: Label,
    first_seen: i64,
    last_seen: i64,
}

impl From<&ClusterRecord> for ClusterSummary {
    fn from(c: &ClusterRecord) -> Self {
        Self {
            cluster_id: c.cluster_id,
            size: c.size(),
            label: c.label,
            first_seen: c.first_seen,
            last_seen: c.last_seen,
        }
    }
}

async fn list_clusters(State(p): State<Arc<Pipeline>>) -> Response {
    let list: Vec<ClusterSummary> = p.clusters().iter().map(ClusterSummary::from).collect();
    Json(list).into_response()
}

async fn get_cluster(State(p): State<Arc<Pipeline>>, Path(id): Path<ClusterId>) -> Result<Response, ApiError> {
    let c = p.cluster(id).ok_or_else(|| ApiError::not_found(format!("unknown cluster {id}")))?;
    Ok(Json(json!({
        "cluster_id": c.cluster_id,
        "size": c.size(),
        "label": c.label,
        "first_seen": c.first_seen,
        "last_seen": c.last_seen,
        "members": c.members,
    }))
    .into_response())
}

async fn histogram(State(p): State<Arc<Pipeline>>) -> Response {
    Json(p.size_histogram()).into_response()
}

async fn lifespan(State(p): State<Arc<Pipeline>>) -> Response {
    Json(p.lifespan_stats()).into_response()
}

async fn health(State(p): State<Arc<Pipeline>>) -> Response {
    Json(json!({
        "status": "ok",
        "emails": p.email_count(),
        "clusters": p.cluster_count(),
    }))
    .into_response()
}

pub fn router(p: Arc<Pipeline>) -> Router {
    Router::new()
        .route("/v1/emails", post(ingest))
        .route("/v1/score", post(score))
        .route("/v1/clusters", get(list_clusters))
        .route("/v1/clusters/{id}", get(get_cluster))
        .route("/v1/clusters/{id}/label", post(label))
        .route("/v1/stats/histogram", get(histogram))
        .route("/v1/stats/lifespan", get(lifespan))
        .route("/v1/health", get(health))
        .with_state(p)
}

/// Serves until ctrl-c.
pub async fn serve(p: Arc<Pipeline>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(p))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
