use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use streetgaze_core::{ComparisonRecord, Side};
use tower_http::services::ServeDir;

use crate::config::ServerConfig;
use crate::error::ServiceError;
use crate::model::{Demographics, GazeSampleIn, PairAssignment, SessionState};
use crate::service::{ExportOptions, SurveyService, SystemClock};

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Mutex<SurveyService>>,
    pub admin_token: String,
    pub export_dir: PathBuf,
}

impl AppState {
    fn lock(&self) -> MutexGuard<'_, SurveyService> {
        self.service.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// A JSON error body `{"error": code, "message": text}`.
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    existing: Option<Box<ComparisonRecord>>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            existing: None,
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            ServiceError::SessionNotFound(_) | ServiceError::PairNotFound(_) => {
                (StatusCode::NOT_FOUND, "not_found")
            }
            ServiceError::NoMorePairs(_) => (StatusCode::CONFLICT, "no_more_pairs"),
            ServiceError::Exhausted(_) => (StatusCode::CONFLICT, "no_more_pairs"),
            ServiceError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
            ServiceError::SessionClosed(_) => (StatusCode::GONE, "session_closed"),
            ServiceError::TooLarge { .. } => (StatusCode::PAYLOAD_TOO_LARGE, "too_large"),
            ServiceError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        let existing = match e {
            ServiceError::Conflict { existing, .. } => Some(existing),
            _ => None,
        };
        Self {
            status,
            code,
            message,
            existing,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some(existing) = self.existing {
            body["existing"] = json!(existing);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub state: SessionState,
    pub pairs_served: u32,
    pub pairs_answered: u32,
    pub pairs_per_session: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairView {
    #[serde(flatten)]
    pub pair: PairAssignment,
    pub left_url: String,
    pub right_url: String,
    pub pairs_per_session: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceRequest {
    pub pair_id: String,
    pub chosen: Side,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeBatch {
    pub image_id: String,
    pub samples: Vec<GazeSampleIn>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportQuery {
    #[serde(default)]
    pub include_abandoned: bool,
}

async fn create_session(
    State(app): State<AppState>,
    body: Result<Json<Demographics>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let Json(demographics) = body?;
    let mut svc = app.lock();
    let s = svc.create_session(demographics)?;
    Ok((
        StatusCode::CREATED,
        Json(SessionView {
            session_id: s.session_id,
            state: s.state,
            pairs_served: s.pairs_served,
            pairs_answered: s.pairs_answered,
            pairs_per_session: svc.config().pairs_per_session,
        }),
    ))
}

async fn next_pair(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<PairView>> {
    let mut svc = app.lock();
    let pair = svc.next_pair(&id)?;
    let url = |image_id: &str| {
        let file = svc
            .config()
            .image(image_id)
            .map(|i| i.file.clone())
            .unwrap_or_else(|| format!("{image_id}.jpg"));
        format!("/images/{file}")
    };
    Ok(Json(PairView {
        left_url: url(&pair.left_image),
        right_url: url(&pair.right_image),
        pairs_per_session: svc.config().pairs_per_session,
        pair,
    }))
}

async fn record_choice(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ChoiceRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<ComparisonRecord>)> {
    let Json(req) = body?;
    let record = app.lock().record_choice(&id, &req.pair_id, req.chosen)?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn record_gaze(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<GazeBatch>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Json(batch) = body?;
    let accepted = app.lock().record_gaze_batch(&id, &batch.image_id, &batch.samples)?;
    Ok(Json(json!({ "accepted": accepted })))
}

fn authorize(app: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let ok = presented.is_some_and(|t| constant_time_eq(t.as_bytes(), app.admin_token.as_bytes()));
    if ok {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "admin token required"))
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn export(
    State(app): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<ExportQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    authorize(&app, &headers)?;
    let opts = ExportOptions {
        include_abandoned: query.include_abandoned,
    };
    let svc = app.lock();
    let dest = app.export_dir.join(format!("seq-{:010}", svc.last_seq()));
    let summary = svc.export_logs(&dest, opts)?;
    Ok(Json(json!({
        "directory": dest,
        "files": summary.files,
        "comparisons": summary.comparisons,
        "gaze_samples": summary.gaze_samples,
        "sessions": summary.sessions,
    })))
}

async fn stats(State(app): State<AppState>, headers: HeaderMap) -> ApiResult<Json<serde_json::Value>> {
    authorize(&app, &headers)?;
    let svc = app.lock();
    Ok(Json(json!({
        "exposure": svc.exposure_stats(),
        "sessions": svc.state().sessions.len(),
        "choices": svc.state().choices.len(),
    })))
}

/// Body limit that fits a full gaze batch.
const MAX_BODY_BYTES: usize = 8 * 1024 * 1024;

/// API routes without static file serving.
pub fn api_router(app: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/pair", get(next_pair))
        .route("/sessions/{id}/choice", post(record_choice))
        .route("/sessions/{id}/gaze", post(record_gaze))
        .route("/export", get(export))
        .route("/stats", get(stats))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(app)
}

pub fn router(app: AppState, image_dir: PathBuf, static_dir: Option<PathBuf>) -> Router {
    let router = api_router(app).nest_service("/images", ServeDir::new(image_dir));
    match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

/// Runs the HTTP server until Ctrl-C.
pub async fn serve(cfg: ServerConfig) -> Result<(), ServiceError> {
    let study = cfg.study_config()?;
    let service = SurveyService::open(study, &cfg.data_dir, cfg.snapshot_every, Arc::new(SystemClock))?;
    let app = AppState {
        service: Arc::new(Mutex::new(service)),
        admin_token: cfg.admin_token.clone(),
        export_dir: cfg.export_dir(),
    };
    let sweeper = app.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            match sweeper.lock().sweep_abandoned() {
                Ok(ids) if !ids.is_empty() => tracing::info!(count = ids.len(), "sessions marked abandoned"),
                Ok(_) => {}
                Err(e) => tracing::error!(error = %e, "abandonment sweep failed"),
            }
        }
    });
    let listener = tokio::net::TcpListener::bind((cfg.bind.as_str(), cfg.port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "survey service listening");
    axum::serve(listener, router(app, cfg.image_dir.clone(), cfg.static_dir.clone()))
        .with_graceful_shutdown(async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await?;
    Ok(())
}
