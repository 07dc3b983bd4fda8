//! HTTP review service over a workspace whose loop awaits review.
//!
//! Reads take a snapshot of the manifest and session files and never hold
//! the workspace lock. Writes are serialized through one mutex; finalize
//! additionally opens the workspace, which takes its exclusive lock for the
//! duration of the merge.

use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use loopmark::orchestrator::{self, LoopError, Phase};
use loopmark::review::api::{
    ErrorBody, FinalizeResult, ItemList, ItemUpdate, ItemView, LabelMapView, LabelsBody, PredictionsView,
    SessionView,
};
use loopmark::review::{ReviewDir, ReviewError, ReviewSession};
use loopmark::simulation::annotator::AnnotatorCostModel;
use loopmark::workspace::{ImageId, Workspace, WorkspaceError, WorkspaceManifest};

/// The JSON Schema of every request and response body.
pub const API_SCHEMA: &str = include_str!("../schema/review-api.schema.json");

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workspace: PathBuf,
    /// Labor cost table applied when the review is finalized.
    pub costs: AnnotatorCostModel,
    /// Directory of a built review UI, served at `/`.
    pub ui_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(workspace: impl Into<PathBuf>) -> Self {
        Self {
            workspace: workspace.into(),
            costs: AnnotatorCostModel::default(),
            ui_dir: None,
        }
    }
}

#[derive(Debug)]
struct AppState {
    cfg: ServiceConfig,
    writes: Mutex<()>,
}

type Shared = Arc<AppState>;

/// An error response: a status code and an [`ErrorBody`].
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl ToString) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.to_string(),
                pending: None,
            },
        }
    }

    fn pending(message: impl ToString, pending: Vec<ImageId>) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            body: ErrorBody {
                error: message.to_string(),
                pending: Some(pending),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(error = %self.body.error, "request failed");
        }
        (self.status, Json(self.body)).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::UnknownItem(_) => StatusCode::NOT_FOUND,
            ReviewError::InvalidLabels { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::Conflict(_) | ReviewError::NoSession(_) => StatusCode::CONFLICT,
            ReviewError::Io { .. } | ReviewError::Corrupt(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e)
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        let status = match &e {
            WorkspaceError::Locked(_) => StatusCode::CONFLICT,
            WorkspaceError::UnknownImage(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e)
    }
}

impl From<LoopError> for ApiError {
    fn from(e: LoopError) -> Self {
        match e {
            LoopError::Review(e) => e.into(),
            LoopError::Workspace(e) => e.into(),
            LoopError::ReviewPending { pending, .. } => Self::pending("review items still pending", pending),
            e @ (LoopError::WrongPhase { .. } | LoopError::BatchMismatch(_) | LoopError::NotSeeded) => {
                Self::new(StatusCode::CONFLICT, e)
            }
            e => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Everything a request needs, read from disk without locking.
struct Snapshot {
    manifest: WorkspaceManifest,
    dir: ReviewDir,
    session: ReviewSession,
    phase: Phase,
}

fn snapshot(root: &Path) -> ApiResult<Snapshot> {
    let manifest = Workspace::load_manifest(root)?;
    let state = manifest.loop_state.as_ref().ok_or(LoopError::NotSeeded)?;
    if state.phase != Phase::AwaitingReview {
        return Err(LoopError::WrongPhase {
            expected: Phase::AwaitingReview,
            actual: state.phase,
        }
        .into());
    }
    let (phase, iteration) = (state.phase, state.iteration);
    let dir = ReviewDir::new(root, iteration);
    let session = dir.load_session()?;
    Ok(Snapshot {
        manifest,
        dir,
        session,
        phase,
    })
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e)))
}

fn item_view(snap: &Snapshot, id: &ImageId) -> ApiResult<ItemView> {
    let item = snap
        .session
        .items
        .get(id)
        .ok_or_else(|| ReviewError::UnknownItem(id.clone()))?;
    let entry = snap
        .manifest
        .images
        .get(id)
        .ok_or_else(|| WorkspaceError::UnknownImage(id.clone()))?;
    Ok(ItemView {
        id: id.clone(),
        status: item.status,
        original_name: entry.original_name.clone(),
        width: entry.width,
        height: entry.height,
        boxes: item.boxes,
        pre_accepted: item.pre_accepted,
    })
}

async fn get_session(State(app): State<Shared>) -> ApiResult<Json<SessionView>> {
    let root = app.cfg.workspace.clone();
    blocking(move || {
        let snap = snapshot(&root)?;
        Ok(Json(SessionView::new(&snap.session, snap.phase)))
    })
    .await
}

async fn list_items(State(app): State<Shared>) -> ApiResult<Json<ItemList>> {
    let root = app.cfg.workspace.clone();
    blocking(move || {
        let snap = snapshot(&root)?;
        let items = snap
            .session
            .items
            .keys()
            .map(|id| item_view(&snap, id))
            .collect::<ApiResult<_>>()?;
        Ok(Json(ItemList {
            iteration: snap.session.iteration,
            items,
        }))
    })
    .await
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn get_image(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let root = app.cfg.workspace.clone();
    blocking(move || {
        let id = ImageId::new(id);
        let snap = snapshot(&root)?;
        item_view(&snap, &id)?;
        let path = root.join(&snap.manifest.images[&id].path);
        let bytes = std::fs::read(&path).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
        Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
    })
    .await
}

async fn get_predictions(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<PredictionsView>> {
    let root = app.cfg.workspace.clone();
    blocking(move || {
        let id = ImageId::new(id);
        let snap = snapshot(&root)?;
        let view = item_view(&snap, &id)?;
        Ok(Json(PredictionsView {
            boxes: snap.dir.review_boxes(&snap.session, &id)?,
            staged: snap.dir.staged(&id)?,
            id,
            status: view.status,
            width: view.width,
            height: view.height,
            auto_accept_confidence: snap.session.auto_accept_confidence,
        }))
    })
    .await
}

async fn get_labelmap(State(app): State<Shared>) -> ApiResult<Json<LabelMapView>> {
    let root = app.cfg.workspace.clone();
    blocking(move || {
        let manifest = Workspace::load_manifest(&root)?;
        Ok(Json(LabelMapView::from(&manifest.label_map)))
    })
    .await
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid body: {e}")))
}

async fn put_labels(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<ItemUpdate>> {
    let root = app.cfg.workspace.clone();
    let _guard = app.writes.lock().await;
    blocking(move || {
        let id = ImageId::new(id);
        let snap = snapshot(&root)?;
        item_view(&snap, &id)?;
        let LabelsBody { boxes } = parse_body(&body)?;
        let session = snap
            .dir
            .put_labels(&snap.manifest.label_map, &id, &boxes, loopmark::clock::Clock::from_env())?;
        Ok(Json(ItemUpdate {
            status: session.items[&id].status,
            id,
        }))
    })
    .await
}

async fn accept_item(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ItemUpdate>> {
    let root = app.cfg.workspace.clone();
    let _guard = app.writes.lock().await;
    blocking(move || {
        let id = ImageId::new(id);
        let snap = snapshot(&root)?;
        item_view(&snap, &id)?;
        let session = snap.dir.accept(&id, loopmark::clock::Clock::from_env())?;
        Ok(Json(ItemUpdate {
            status: session.items[&id].status,
            id,
        }))
    })
    .await
}

/// Optional body of `POST /api/finalize`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FinalizeRequest {
    pub iteration: Option<u32>,
}

async fn finalize(State(app): State<Shared>, body: Bytes) -> ApiResult<Json<FinalizeResult>> {
    let cfg = app.cfg.clone();
    let _guard = app.writes.lock().await;
    blocking(move || {
        let request: FinalizeRequest = if body.iter().all(u8::is_ascii_whitespace) {
            FinalizeRequest::default()
        } else {
            parse_body(&body)?
        };
        let snap = snapshot(&cfg.workspace)?;
        let iteration = snap.session.iteration;
        if let Some(asked) = request.iteration.filter(|i| *i != iteration) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("iteration {iteration} is under review, not {asked}"),
            ));
        }
        let pending = snap.session.pending();
        if !pending.is_empty() {
            return Err(ApiError::pending(
                format!("{} item(s) still pending review", pending.len()),
                pending,
            ));
        }
        let corrected = snap.dir.corrected_labels(&snap.session)?;
        let mut ws = Workspace::open(&cfg.workspace)?;
        let result = orchestrator::finalize(&mut ws, &cfg.costs, iteration, &corrected)?;
        tracing::info!(iteration, merged = result.merged, "review finalized");
        Ok(Json(result))
    })
    .await
}

async fn get_schema() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/schema+json")], API_SCHEMA)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

const INDEX: &str = "<!doctype html>\n<title>loopmark review</title>\n<p>The review API is served under <code>/api</code>. \
Start the service with a UI directory to serve the review UI here.</p>\n";

/// The service's routes, with state bound.
pub fn router(cfg: ServiceConfig) -> Router {
    let ui_dir = cfg.ui_dir.clone();
    let state = Arc::new(AppState {
        cfg,
        writes: Mutex::new(()),
    });
    let api = Router::new()
        .route("/session", get(get_session))
        .route("/items", get(list_items))
        .route("/items/{id}/image", get(get_image))
        .route("/items/{id}/predictions", get(get_predictions))
        .route("/items/{id}/labels", put(put_labels))
        .route("/items/{id}/accept", post(accept_item))
        .route("/labelmap", get(get_labelmap))
        .route("/finalize", post(finalize))
        .route("/schema", get(get_schema))
        .fallback(not_found)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(|| async { Html(INDEX) })),
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    cfg: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, workspace = %cfg.workspace.display(), "review service listening");
    }
    axum::serve(listener, router(cfg)).with_graceful_shutdown(shutdown).await
}
