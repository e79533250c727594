//! HTTP+JSON backend for the reader study.
//!
//! | method | path | auth |
//! |---|---|---|
//! | POST | `/studies` | admin |
//! | GET | `/studies/{id}/next?rater=` | |
//! | GET | `/items/{id}/image.png` | |
//! | POST | `/studies/{id}/responses` | |
//! | POST | `/studies/{id}/finalize` | admin |
//! | GET | `/studies/{id}/stats[?partial=true]` | admin |
//!
//! Admin routes expect the token in the `x-admin-token` header. Errors are
//! `{"code": ..., "message": ...}`.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use scargan::dataset::{read_dataset, Provenance, ScanSlice};
use scargan::study::{window_to_u8, StudyError, StudyStore, Truth, DEFAULT_ITEMS_PER_CLASS};

pub const ADMIN_HEADER: &str = "x-admin-token";

pub struct AppState {
    store: Mutex<StudyStore>,
    admin_token: String,
}

impl AppState {
    pub fn new(store: StudyStore, admin_token: impl Into<String>) -> Arc<Self> {
        Arc::new(Self { store: Mutex::new(store), admin_token: admin_token.into() })
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        let status = match &e {
            StudyError::NotFound(_) => StatusCode::NOT_FOUND,
            StudyError::Conflict(_) | StudyError::Finalized(_) | StudyError::Incomplete(_) => StatusCode::CONFLICT,
            StudyError::Invalid(_) => StatusCode::BAD_REQUEST,
            StudyError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn require_admin(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    match headers.get(ADMIN_HEADER).and_then(|v| v.to_str().ok()) {
        Some(t) if !state.admin_token.is_empty() && t == state.admin_token => Ok(()),
        _ => Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid admin token")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateStudy {
    pub session_id: String,
    /// Dataset directory holding real-scar slices.
    pub real_dataset: PathBuf,
    /// Dataset directory holding simulated slices (may equal `real_dataset`).
    pub simulated_dataset: PathBuf,
    #[serde(default = "default_n_each")]
    pub n_each: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_each() -> usize {
    DEFAULT_ITEMS_PER_CLASS
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CreatedStudy {
    pub session_id: String,
    pub items: usize,
}

/// Real pool: scar slices not marked simulated. Simulated pool: simulated slices with scar.
fn pools(req: &CreateStudy) -> ApiResult<(Vec<ScanSlice>, Vec<ScanSlice>)> {
    let load = |dir: &PathBuf| read_dataset(dir).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid", e.to_string()));
    let pick = |dir: &PathBuf, want: bool| -> ApiResult<Vec<ScanSlice>> {
        let (manifest, slices) = load(dir)?;
        Ok(manifest
            .slices
            .iter()
            .zip(slices)
            .filter(|(e, s)| s.has_scar && (e.provenance == Some(Provenance::Simulated)) == want)
            .map(|(_, s)| s)
            .collect())
    };
    Ok((pick(&req.real_dataset, false)?, pick(&req.simulated_dataset, true)?))
}

async fn create_study(State(state): State<Arc<AppState>>, headers: HeaderMap, Json(req): Json<CreateStudy>) -> ApiResult<(StatusCode, Json<CreatedStudy>)> {
    require_admin(&state, &headers)?;
    let (real, simulated) = pools(&req)?;
    let mut store = state.store.lock().expect("store lock");
    let s = store.create_study(&req.session_id, &real, &simulated, req.n_each, req.seed)?;
    log::info!("created study {} with {} items", req.session_id, s.header.items.len());
    Ok((StatusCode::CREATED, Json(CreatedStudy { session_id: req.session_id, items: s.header.items.len() })))
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    rater: String,
}

/// Next unanswered item, or `done` once the rater has answered everything.
#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct NextItem {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
    pub answered: usize,
    pub total: usize,
}

async fn next_item(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<NextQuery>) -> ApiResult<Json<NextItem>> {
    let mut store = state.store.lock().expect("store lock");
    let next = store.next_item(&id, &q.rater)?;
    let s = store.session(&id)?;
    let total = s.header.items.len();
    let answered = s.answered_by(&q.rater);
    Ok(Json(match next {
        Some(i) => NextItem { done: false, item_id: Some(i.item_id), image_url: Some(i.image_url), answered, total },
        None => NextItem { done: true, item_id: None, image_url: None, answered, total },
    }))
}

fn encode_png(size: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, size as u32, size as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().expect("png header to memory");
    w.write_image_data(pixels).expect("png data to memory");
    w.finish().expect("png finish");
    out
}

async fn item_image(State(state): State<Arc<AppState>>, Path(item_id): Path<String>) -> ApiResult<Response> {
    let (size, image) = state.store.lock().expect("store lock").item_image(&item_id)?;
    let png = encode_png(size, &window_to_u8(&image));
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], png).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResponseRequest {
    pub rater_id: String,
    pub item_id: String,
    pub choice: Truth,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Ack {
    pub rater_id: String,
    pub item_id: String,
    pub choice: Truth,
    pub timestamp: u64,
}

async fn record_response(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<ResponseRequest>,
) -> ApiResult<(StatusCode, Json<Ack>)> {
    let r = state.store.lock().expect("store lock").record_response(&id, &req.rater_id, &req.item_id, req.choice)?;
    Ok((StatusCode::CREATED, Json(Ack { rater_id: r.rater_id, item_id: r.item_id, choice: r.choice, timestamp: r.timestamp })))
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Finalized {
    pub session_id: String,
    pub status: String,
}

async fn finalize(State(state): State<Arc<AppState>>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Finalized>> {
    require_admin(&state, &headers)?;
    state.store.lock().expect("store lock").finalize(&id)?;
    Ok(Json(Finalized { session_id: id, status: "finalized".into() }))
}

#[derive(Debug, Deserialize)]
struct StatsQuery {
    #[serde(default)]
    partial: bool,
}

async fn stats(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<StatsQuery>,
) -> ApiResult<Json<scargan::study::StudyStats>> {
    require_admin(&state, &headers)?;
    Ok(Json(state.store.lock().expect("store lock").stats(&id, q.partial)?))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/studies", post(create_study))
        .route("/studies/:id/next", get(next_item))
        .route("/studies/:id/responses", post(record_response))
        .route("/studies/:id/finalize", post(finalize))
        .route("/studies/:id/stats", get(stats))
        .route("/items/:id/image.png", get(item_image))
        .fallback(fallback)
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("study service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
