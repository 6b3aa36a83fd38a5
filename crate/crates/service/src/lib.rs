//! REST API over an annotation store, used by the review UI.
//!
//! Reads go through the store's snapshot locks, so they see whole commits
//! only. Edits need a live lease on the video and are serialized per video
//! inside the process and by the store's writer lock across processes.
//! The endpoint table lives in `docs/api.md`.

pub mod lease;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use panolabel_core::annotation::{EditOp, Issue, IssueKind, ReviewReport, Revision, Status};
use panolabel_core::pipeline::ingest::raster_path;
use panolabel_core::store::{format, Store, StoreError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub use lease::{Lease, LeaseError, Leases, DEFAULT_TTL};

/// Environment variable holding the bearer token. Unset means no auth.
pub const TOKEN_ENV: &str = "PANOLABEL_TOKEN";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store_root: PathBuf,
    pub lease_ttl: Duration,
    pub token: Option<String>,
    /// Static files served under `/` (the built review UI).
    pub ui_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(store_root: impl Into<PathBuf>) -> Self {
        Self { store_root: store_root.into(), lease_ttl: DEFAULT_TTL, token: None, ui_dir: None }
    }

    /// Picks the token up from [`TOKEN_ENV`].
    pub fn with_env_token(mut self) -> Self {
        self.token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        self
    }
}

struct App {
    store: Store,
    leases: Leases,
    token: Option<String>,
    writers: std::sync::Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl App {
    fn writer(&self, video: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.writers.lock().unwrap().entry(video.to_string()).or_default().clone()
    }
}

type Shared = Arc<App>;

// ---- errors ----

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    extra: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), extra: Value::Null }
    }

    fn with(mut self, extra: Value) -> Self {
        self.extra = extra;
        self
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::NotFound(_) | StoreError::BadVideoId(_) => Self::new(StatusCode::NOT_FOUND, "unknown_video", msg),
            StoreError::StaleSequence { expected, found } => Self::new(StatusCode::CONFLICT, "stale_sequence", msg)
                .with(json!({ "expected": expected, "found": found })),
            StoreError::Locked(_) => Self::new(StatusCode::CONFLICT, "locked", msg),
            StoreError::Status { .. } => Self::new(StatusCode::CONFLICT, "wrong_status", msg),
            StoreError::Revision { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_revision", msg),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "store_error", msg),
        }
    }
}

impl From<LeaseError> for ApiError {
    fn from(e: LeaseError) -> Self {
        let msg = e.to_string();
        match e {
            LeaseError::HeldByOther(l) => Self::new(StatusCode::CONFLICT, "lease_conflict", msg).with(json!({ "lease": l })),
            LeaseError::NotHeld => Self::new(StatusCode::CONFLICT, "lease_required", msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Value::Object(extra) = self.extra {
            body.as_object_mut().unwrap().extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs store work off the async threads.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "panic", e.to_string())))
}

// ---- payloads ----

#[derive(Debug, Serialize)]
struct VideoSummary {
    id: String,
    status: &'static str,
    frames: usize,
    width: u32,
    height: u32,
    fps: f64,
    progress: usize,
}

#[derive(Debug, Serialize)]
struct InstanceView {
    id: u32,
    label: String,
    first_frame: Option<usize>,
    last_frame: Option<usize>,
}

#[derive(Debug, Serialize)]
struct IssueView {
    frame: usize,
    instance: Option<u32>,
    kind: &'static str,
    comment: String,
    blocking: bool,
    resolved: bool,
}

#[derive(Debug, Deserialize)]
struct LeaseBody {
    reviewer: String,
}

#[derive(Debug, Deserialize)]
struct ReviewerQuery {
    reviewer: String,
}

#[derive(Debug, Deserialize)]
struct RevisionBody {
    reviewer: String,
    /// One revision in the revision-log syntax.
    revision: String,
}

#[derive(Debug, Deserialize)]
struct FinalizeBody {
    reviewer: String,
    #[serde(default, rename = "override")]
    force: bool,
}

fn summary(store: &Store, id: &str) -> ApiResult<VideoSummary> {
    let m = store.manifest(id)?;
    Ok(VideoSummary {
        id: m.video_id,
        status: m.status.as_str(),
        frames: m.frame_count,
        width: m.dims.width,
        height: m.dims.height,
        fps: m.fps,
        progress: m.progress,
    })
}

/// Whether a later edit addresses the issue: a relabel, delete or merge of
/// the flagged instance for `wrong_label`; an edit that adds pixels on the
/// flagged frame for `missing`.
pub fn resolves(issue: &Issue, op: &EditOp) -> bool {
    match issue.kind {
        IssueKind::WrongLabel => match (issue.instance_id, op) {
            (Some(id), EditOp::Relabel { instance, .. } | EditOp::DeleteInstance { instance }) => *instance == id,
            (Some(id), EditOp::MergeInstances { absorb, .. }) => *absorb == id,
            _ => false,
        },
        IssueKind::Missing => match op {
            EditOp::AddInstance { frame, .. } | EditOp::ReplaceMask { frame, .. } => *frame == issue.frame_index,
            EditOp::Paint { frame, erase: false, .. } => *frame == issue.frame_index,
            _ => false,
        },
        IssueKind::BadBoundary | IssueKind::IdSwitch => false,
    }
}

/// Blocking issues no revision has addressed yet.
pub fn open_blocking_issues<'a>(report: &'a ReviewReport, revs: &[Revision]) -> Vec<&'a Issue> {
    report
        .issues
        .iter()
        .filter(|i| i.kind.blocks_finalize() && !revs.iter().any(|r| resolves(i, &r.op)))
        .collect()
}

// ---- handlers ----

async fn health() -> &'static str {
    "ok"
}

async fn list_videos(State(app): State<Shared>) -> ApiResult<Json<Vec<VideoSummary>>> {
    blocking(move || {
        let ids = app.store.list_videos()?;
        ids.iter().map(|id| summary(&app.store, id)).collect::<ApiResult<Vec<_>>>().map(Json)
    })
    .await
}

async fn get_video(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let lease = app.leases.current(&id, SystemTime::now());
    blocking(move || {
        let s = summary(&app.store, &id)?;
        let (v, revs) = app.store.load_current_with_log(&id)?;
        let next_seq = revs.last().map_or(1, |r| r.seq + 1);
        let instances: Vec<InstanceView> = v
            .instances
            .iter()
            .map(|(id, i)| InstanceView { id: *id, label: i.label.clone(), first_frame: i.first_frame, last_frame: i.last_frame })
            .collect();
        Ok(Json(json!({ "video": s, "instances": instances, "next_seq": next_seq, "lease": lease })))
    })
    .await
}

async fn get_frame(State(app): State<Shared>, Path((id, index)): Path<(String, usize)>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let (v, revs) = app.store.load_current_with_log(&id)?;
        let frame = v
            .frames
            .get(index)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_frame", format!("frame {index} out of range")))?;
        Ok(Json(json!({
            "video": id,
            "frame": index,
            "seq": revs.last().map_or(0, |r| r.seq),
            "instances": frame.entries().len(),
            "annotation": format::write_frame(frame, v.dims),
            "raster": format!("/api/videos/{id}/frames/{index}/raster"),
        })))
    })
    .await
}

async fn get_raster(State(app): State<Shared>, Path((id, index)): Path<(String, usize)>) -> ApiResult<Response> {
    blocking(move || {
        let m = app.store.manifest(&id)?;
        if index >= m.frame_count {
            return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_frame", format!("frame {index} out of range")));
        }
        let path = raster_path(&app.store, &m, index);
        let bytes = std::fs::read(&path)
            .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "missing_raster", format!("{}: {e}", path.display())))?;
        let kind = match m.raster.as_str() {
            "pbm" => "image/x-portable-bitmap",
            "ppm" => "image/x-portable-pixmap",
            _ => "image/x-portable-graymap",
        };
        Ok(([(header::CONTENT_TYPE, kind)], bytes).into_response())
    })
    .await
}

async fn get_report(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let report = app
            .store
            .report(&id)?
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_report", format!("video {id:?} has no report yet")))?;
        let revs = app.store.revisions(&id)?;
        let issues: Vec<IssueView> = report
            .issues
            .iter()
            .map(|i| IssueView {
                frame: i.frame_index,
                instance: i.instance_id,
                kind: i.kind.as_str(),
                comment: i.comment.clone(),
                blocking: i.kind.blocks_finalize(),
                resolved: revs.iter().any(|r| resolves(i, &r.op)),
            })
            .collect();
        Ok(Json(json!({ "score": report.score, "issues": issues, "text": format::write_report(&report) })))
    })
    .await
}

async fn get_revisions(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let revs = app.store.revisions(&id)?;
        let next = revs.last().map_or(1, |r| r.seq + 1);
        Ok(Json(json!({ "next_seq": next, "log": format::write_revisions(&revs) })))
    })
    .await
}

async fn take_lease(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<LeaseBody>) -> ApiResult<Json<Lease>> {
    if body.reviewer.trim().is_empty() {
        return Err(ApiError::bad_request("reviewer must be non-empty"));
    }
    let store_app = app.clone();
    let vid = id.clone();
    blocking(move || summary(&store_app.store, &vid).map(|_| ())).await?;
    Ok(Json(app.leases.acquire(&id, &body.reviewer, SystemTime::now())?))
}

async fn drop_lease(State(app): State<Shared>, Path(id): Path<String>, Query(q): Query<ReviewerQuery>) -> ApiResult<StatusCode> {
    app.leases.release(&id, &q.reviewer, SystemTime::now())?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_revision(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<RevisionBody>) -> ApiResult<Json<Value>> {
    app.leases.check(&id, &body.reviewer, SystemTime::now())?;
    let revs = format::parse_revisions(&body.revision)
        .map_err(|e| ApiError::bad_request(format!("revision line {}: {}", e.line, e.message)))?;
    let [rev]: [Revision; 1] =
        revs.try_into().map_err(|v: Vec<Revision>| ApiError::bad_request(format!("expected one revision, got {}", v.len())))?;
    let writer = app.writer(&id);
    let _serial = writer.lock().await;
    blocking(move || {
        let _lock = app.store.lock_writer(&id)?;
        let seq = app.store.append_revision(&id, &rev)?;
        let status = app.store.manifest(&id)?.status;
        Ok(Json(json!({ "seq": seq, "status": status.as_str() })))
    })
    .await
}

async fn finalize(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<FinalizeBody>) -> ApiResult<Json<Value>> {
    app.leases.check(&id, &body.reviewer, SystemTime::now())?;
    let writer = app.writer(&id);
    let _serial = writer.lock().await;
    blocking(move || {
        let _lock = app.store.lock_writer(&id)?;
        let m = app.store.manifest(&id)?;
        if !matches!(m.status, Status::Refined | Status::Reviewed) {
            return Err(StoreError::Status { from: m.status.as_str(), to: "final" }.into());
        }
        let report = app.store.report(&id)?.unwrap_or_else(|| ReviewReport { score: 0.0, issues: Vec::new() });
        let revs = app.store.revisions(&id)?;
        let open = open_blocking_issues(&report, &revs);
        if !open.is_empty() && !body.force {
            let list: Vec<Value> = open
                .iter()
                .map(|i| json!({ "frame": i.frame_index, "instance": i.instance_id, "kind": i.kind.as_str() }))
                .collect();
            return Err(ApiError::new(StatusCode::CONFLICT, "blocking_issues", format!("{} unresolved blocking issues", open.len()))
                .with(json!({ "issues": list })));
        }
        app.store.set_status(&id, Status::Final)?;
        Ok(Json(json!({ "status": "final", "overridden": open.len() })))
    })
    .await
}

async fn auth(State(app): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let expected = HeaderValue::from_str(&format!("Bearer {token}")).ok();
        if req.headers().get(header::AUTHORIZATION) != expected.as_ref() {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(cfg: &ServiceConfig) -> std::io::Result<Router> {
    let store = Store::open(&cfg.store_root).map_err(std::io::Error::other)?;
    let app = Arc::new(App {
        store,
        leases: Leases::new(cfg.lease_ttl),
        token: cfg.token.clone(),
        writers: Default::default(),
    });
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/videos", get(list_videos))
        .route("/api/videos/{id}", get(get_video))
        .route("/api/videos/{id}/frames/{index}", get(get_frame))
        .route("/api/videos/{id}/frames/{index}/raster", get(get_raster))
        .route("/api/videos/{id}/report", get(get_report))
        .route("/api/videos/{id}/revisions", get(get_revisions).post(post_revision))
        .route("/api/videos/{id}/lease", post(take_lease).delete(drop_lease))
        .route("/api/videos/{id}/finalize", post(finalize))
        .route_layer(middleware::from_fn_with_state(app.clone(), auth))
        .with_state(app);
    Ok(match &cfg.ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") }),
    })
}

/// Serves until the process ends.
pub async fn serve(listener: TcpListener, cfg: &ServiceConfig) -> std::io::Result<()> {
    let app = router(cfg)?;
    log::info!("review service on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}

/// Binds `addr` on a background runtime thread and returns the bound
/// address; used by tests and by callers without their own runtime.
pub fn spawn(addr: SocketAddr, cfg: ServiceConfig) -> std::io::Result<SocketAddr> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = rt.block_on(TcpListener::bind(addr))?;
    let bound = listener.local_addr()?;
    std::thread::spawn(move || {
        if let Err(e) = rt.block_on(serve(listener, &cfg)) {
            log::error!("review service stopped: {e}");
        }
    });
    Ok(bound)
}
