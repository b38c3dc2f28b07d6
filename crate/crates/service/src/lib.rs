//! HTTP session service for interactive model editing.
//!
//! Each session holds an uploaded image and a model; edits, undo and
//! style blends mutate the session under a per-session lock, and every
//! read (preview, pixel probe, export) observes exactly one revision.

pub mod session;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use glut_core::lut_io::{decode_png, ImageError};
use glut_core::{EditConstraint, EditError, ModelFile};
use serde::{Deserialize, Serialize};
use serde_json::json;
use session::{color_from_wire, EditOutcome, PixelProbe, Session, SessionError, StyleSelection};
use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use tokio::sync::Mutex;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

/// Longest preview edge in pixels.
pub const PREVIEW_EDGE: usize = 1024;
pub const MAX_CUBE_SIZE: usize = 129;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Cap on a whole upload request, in bytes.
    pub max_upload_bytes: usize,
    /// Cap on decoded image size, in pixels.
    pub max_pixels: usize,
    /// Worker threads for preview rendering.
    pub threads: usize,
    /// When set, each session's journal is mirrored to `<dir>/<id>.jsonl`.
    pub journal_dir: Option<PathBuf>,
    /// Allowed CORS origin; `None` allows any.
    pub allow_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_upload_bytes: 64 << 20,
            max_pixels: 64 << 20,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            journal_dir: None,
            allow_origin: None,
        }
    }
}

type SessionHandle = Arc<Mutex<Session>>;

#[derive(Clone)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, SessionHandle>>>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        AppState {
            sessions: Arc::default(),
            config: Arc::new(config),
        }
    }

    fn get(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or(ApiError::NotFound)
    }

    /// Runs `f` with exclusive access to the session on the blocking pool.
    async fn with_session<T: Send + 'static>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let mut guard = self.get(id)?.lock_owned().await;
        tokio::task::spawn_blocking(move || f(&mut guard))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
    }

    fn persist(&self, id: &str, s: &Session) {
        if let Some(dir) = &self.config.journal_dir {
            let path = dir.join(format!("{id}.jsonl"));
            if let Err(e) = std::fs::write(&path, s.journal().to_jsonl()) {
                eprintln!("journal write to {} failed: {e}", path.display());
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("no such session")]
    NotFound,
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::Unsupported(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Invalid(m) => ApiError::Unprocessable(m),
            SessionError::Conflict(m) => ApiError::Conflict(m),
            SessionError::Edit(e @ EditError::Degenerate { .. }) => ApiError::Conflict(e.to_string()),
            SessionError::Edit(e @ (EditError::EmptyJournal | EditError::Lineage)) => ApiError::Conflict(e.to_string()),
            SessionError::Edit(e) => ApiError::Unprocessable(e.to_string()),
        }
    }
}

impl From<axum::extract::multipart::MultipartError> for ApiError {
    fn from(e: axum::extract::multipart::MultipartError) -> Self {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::TooLarge(e.body_text())
        } else {
            ApiError::BadRequest(e.body_text())
        }
    }
}

fn preview_url(id: &str, revision: u64) -> String {
    format!("/sessions/{id}/preview.png?rev={revision}")
}

pub fn router(state: AppState) -> Router {
    let cors = match &state.config.allow_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
            Err(_) => CorsLayer::new(),
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/edit", post(edit))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/blend", post(blend))
        .route("/sessions/{id}/pixel", get(pixel))
        .route("/sessions/{id}/preview.png", get(preview))
        .route("/sessions/{id}/journal.jsonl", get(journal))
        .route("/sessions/{id}/export.cube", get(export_cube))
        .route("/sessions/{id}/export.model", get(export_model))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(config))).await
}

#[derive(Serialize)]
struct Created {
    session_id: String,
    revision: u64,
    preview_url: String,
    primitives: usize,
    styles: Option<usize>,
    width: usize,
    height: usize,
}

fn parse_selection(style: Option<String>, blend: Option<String>) -> Result<Option<StyleSelection>, ApiError> {
    let bad = |what: &str, v: &str| ApiError::BadRequest(format!("malformed {what} field {v:?}"));
    match (style, blend) {
        (Some(_), Some(_)) => Err(ApiError::BadRequest("give either style or blend, not both".into())),
        (Some(s), None) => {
            let index = s.trim().parse().map_err(|_| bad("style", &s))?;
            Ok(Some(StyleSelection::Style { index }))
        }
        (None, Some(b)) => {
            let parts: Vec<&str> = b.split(',').map(str::trim).collect();
            let [l1, l2, a] = parts[..] else {
                return Err(bad("blend", &b));
            };
            Ok(Some(StyleSelection::Blend {
                l1: l1.parse().map_err(|_| bad("blend", &b))?,
                l2: l2.parse().map_err(|_| bad("blend", &b))?,
                alpha: a.parse().map_err(|_| bad("blend", &b))?,
            }))
        }
        (None, None) => Ok(None),
    }
}

/// `POST /sessions` with multipart fields `image` (PNG), `model` (model
/// file) and optionally `style` (index) or `blend` (`l1,l2,alpha`).
async fn create_session(State(state): State<AppState>, mut form: Multipart) -> Result<Response, ApiError> {
    let (mut image, mut model, mut style, mut blend) = (None::<Bytes>, None::<Bytes>, None, None);
    while let Some(field) = form.next_field().await? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => image = Some(field.bytes().await?),
            "model" => model = Some(field.bytes().await?),
            "style" => style = Some(field.text().await?),
            "blend" => blend = Some(field.text().await?),
            other => return Err(ApiError::BadRequest(format!("unexpected field {other:?}"))),
        }
    }
    let image = image.ok_or_else(|| ApiError::BadRequest("missing image field".into()))?;
    let model = model.ok_or_else(|| ApiError::BadRequest("missing model field".into()))?;
    if !image.starts_with(PNG_SIGNATURE) {
        return Err(ApiError::Unsupported("image must be a PNG".into()));
    }
    let selection = parse_selection(style, blend)?;
    let config = state.config.clone();
    let session = tokio::task::spawn_blocking(move || -> Result<(Session, String), ApiError> {
        let file = ModelFile::from_bytes(&model).map_err(|e| ApiError::BadRequest(format!("model file: {e}")))?;
        let (img, _) = decode_png(&image).map_err(|e| match e {
            ImageError::Unsupported(m) => ApiError::Unsupported(m),
            ImageError::Io(e) => ApiError::BadRequest(e.to_string()),
        })?;
        if img.width * img.height > config.max_pixels {
            return Err(ApiError::TooLarge(format!(
                "image has {} pixels, limit {}",
                img.width * img.height,
                config.max_pixels
            )));
        }
        let mut s = Session::new(img, file, selection, config.threads)?;
        s.preview(PREVIEW_EDGE);
        Ok((s, format!("{:032x}", rand::random::<u128>())))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let (session, id) = session;
    let body = Created {
        session_id: id.clone(),
        revision: session.revision(),
        preview_url: preview_url(&id, session.revision()),
        primitives: session.model().len(),
        styles: session.styles(),
        width: session.source().width,
        height: session.source().height,
    };
    state.persist(&id, &session);
    state
        .sessions
        .write()
        .expect("session map poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn session_info(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let sid = id.clone();
    state
        .with_session(&id, move |s| {
            Ok(Json(json!({
                "session_id": sid,
                "revision": s.revision(),
                "preview_url": preview_url(&sid, s.revision()),
                "primitives": s.model().len(),
                "styles": s.styles(),
                "selection": s.selection(),
                "width": s.source().width,
                "height": s.source().height,
                "journal": s.journal().records,
            }))
            .into_response())
        })
        .await
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let removed = state.sessions.write().expect("session map poisoned").remove(&id);
    removed.map(|_| StatusCode::NO_CONTENT).ok_or(ApiError::NotFound)
}

#[derive(Debug, Deserialize)]
pub struct EditRequest {
    pub c_in: [f64; 3],
    pub c_out: [f64; 3],
    #[serde(alias = "K")]
    pub k: usize,
    pub s: f64,
}

#[derive(Serialize)]
struct EditReply {
    #[serde(flatten)]
    outcome: EditOutcome,
    preview_url: String,
}

fn json_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => ApiError::Unprocessable(e.to_string()),
        _ => ApiError::BadRequest(e.to_string()),
    })
}

async fn edit(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: EditRequest = json_body(&body)?;
    let c = EditConstraint::new(color_from_wire(req.c_in)?, color_from_wire(req.c_out)?, req.k, req.s);
    let st = state.clone();
    let sid = id.clone();
    let outcome = state
        .with_session(&id, move |s| {
            let out = s.edit(&c)?;
            st.persist(&sid, s);
            Ok(out)
        })
        .await?;
    let url = preview_url(&id, outcome.revision);
    Ok(Json(EditReply {
        outcome,
        preview_url: url,
    })
    .into_response())
}

fn revision_reply(id: &str, revision: u64) -> Response {
    Json(json!({ "revision": revision, "preview_url": preview_url(id, revision) })).into_response()
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let (st, sid) = (state.clone(), id.clone());
    let rev = state
        .with_session(&id, move |s| {
            let r = s.undo()?;
            st.persist(&sid, s);
            Ok(r)
        })
        .await?;
    Ok(revision_reply(&id, rev))
}

#[derive(Debug, Deserialize)]
pub struct BlendRequest {
    pub l1: usize,
    pub l2: usize,
    pub alpha: f64,
}

async fn blend(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: BlendRequest = json_body(&body)?;
    let (st, sid) = (state.clone(), id.clone());
    let rev = state
        .with_session(&id, move |s| {
            let r = s.blend(req.l1, req.l2, req.alpha)?;
            st.persist(&sid, s);
            Ok(r)
        })
        .await?;
    Ok(revision_reply(&id, rev))
}

#[derive(Deserialize)]
struct PixelQuery {
    x: usize,
    y: usize,
}

async fn pixel(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PixelQuery>,
) -> Result<Json<PixelProbe>, ApiError> {
    state.with_session(&id, move |s| Ok(Json(s.pixel(q.x, q.y)?))).await
}

#[derive(Deserialize)]
struct PreviewQuery {
    edge: Option<usize>,
}

async fn preview(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PreviewQuery>,
) -> Result<Response, ApiError> {
    let edge = q.edge.unwrap_or(PREVIEW_EDGE);
    if edge == 0 || edge > PREVIEW_EDGE {
        return Err(ApiError::Unprocessable(format!("edge must lie in 1..={PREVIEW_EDGE}")));
    }
    let (rev, png) = state.with_session(&id, move |s| Ok((s.revision(), s.preview(edge)))).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-glut-revision"), rev.to_string()),
        ],
        png.as_ref().clone(),
    )
        .into_response())
}

async fn journal(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let text = state.with_session(&id, |s| Ok(s.journal().to_jsonl())).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

#[derive(Deserialize)]
struct CubeQuery {
    size: Option<usize>,
}

async fn export_cube(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<CubeQuery>,
) -> Result<Response, ApiError> {
    let size = q.size.unwrap_or(33);
    if !(2..=MAX_CUBE_SIZE).contains(&size) {
        return Err(ApiError::Unprocessable(format!("size must lie in 2..={MAX_CUBE_SIZE}")));
    }
    let bytes = state.with_session(&id, move |s| Ok(s.export_cube(size))).await?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], bytes).into_response())
}

async fn export_model(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let bytes = state.with_session(&id, |s| Ok(s.export_model())).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}
