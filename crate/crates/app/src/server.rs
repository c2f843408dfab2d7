//! HTTP service hosting sessions under one data directory.
//!
//! Every session owns at most one pipeline worker at a time. Status events
//! go to a per-session broadcast channel with a short backlog so late
//! subscribers still see how a run started.

use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use aiv_core::cache::unix_millis;
use aiv_core::counting::{CountMethod, ZoneConfig};
use aiv_core::detect::{FrameSource, ImageDirSource};
use aiv_core::gallery::{load_index, TemplateRecord};
use aiv_core::geom::Polygon;
use aiv_core::pipeline::{PipelineError, Progress};
use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast;
use tracing::{info, warn};

use crate::session::{
    self, CountMode, CountRun, CreateSession, FieldError, ProgressRecord, SessionConfig, SessionDir, SessionError,
    SessionState, StateRecord,
};

/// Events kept for subscribers that connect after a run started.
pub const EVENT_BACKLOG: usize = 256;
/// A progress event goes out at least every this many frames.
pub const PROGRESS_EVERY_FRAMES: u32 = 30;
/// A progress event goes out at least this often.
pub const PROGRESS_EVERY: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusEvent {
    pub session_id: String,
    /// Unix time in milliseconds, never decreasing within a session.
    pub timestamp: u64,
    pub level: Level,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

/// Error body: `{"error": "...", "fields": [...]}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), fields: Vec::new() }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("session {id} not found"))
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use aiv_core::cache::CacheError;
        let status = match &e {
            SessionError::Invalid(fields) => {
                return Self {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    message: e.to_string(),
                    fields: fields.clone(),
                }
            }
            SessionError::Source(_) | SessionError::GroundTruth { .. } => StatusCode::BAD_REQUEST,
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict(_) | SessionError::NoCache => StatusCode::CONFLICT,
            SessionError::Pipeline(PipelineError::Cache(CacheError::ConfigMismatch { .. })) => StatusCode::CONFLICT,
            SessionError::FrameCountMismatch { .. } | SessionError::Counting(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Pipeline(PipelineError::Counting(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = if self.fields.is_empty() {
            json!({ "error": self.message })
        } else {
            json!({ "error": self.message, "fields": self.fields })
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Events {
    backlog: VecDeque<StatusEvent>,
    last_timestamp: u64,
}

/// One loaded session.
pub struct SessionHandle {
    pub dir: SessionDir,
    pub config: SessionConfig,
    state: Mutex<StateRecord>,
    events: Mutex<Events>,
    sender: broadcast::Sender<StatusEvent>,
    frames: Option<ImageDirSource>,
}

impl SessionHandle {
    fn load(dir: SessionDir) -> Result<Self, SessionError> {
        let config = dir.config()?;
        let mut state = dir.state()?;
        let interrupted = match state.state {
            SessionState::Running => true,
            SessionState::Counting => !dir.has_cache(),
            _ => false,
        };
        if interrupted {
            state = StateRecord {
                state: SessionState::Failed,
                message: Some("interrupted by a restart".into()),
                progress: state.progress,
            };
            dir.save_state(&state)?;
        } else if state.state == SessionState::Counting {
            state = StateRecord { state: SessionState::Cached, message: None, progress: state.progress };
            dir.save_state(&state)?;
        }
        let frames = match &config.frames {
            Some(d) => Some(
                ImageDirSource::open(d, config.video.nominal_fps).map_err(|e| SessionError::Source(e.to_string()))?,
            ),
            None => None,
        };
        let (sender, _) = broadcast::channel(EVENT_BACKLOG);
        Ok(Self {
            dir,
            config,
            state: Mutex::new(state),
            events: Mutex::new(Events { backlog: VecDeque::new(), last_timestamp: 0 }),
            sender,
            frames,
        })
    }

    pub fn state(&self) -> StateRecord {
        self.state.lock().expect("state lock").clone()
    }

    fn set_state(&self, record: StateRecord) {
        if let Err(e) = self.dir.save_state(&record) {
            warn!(session = %self.config.session_id, error = %e, "could not persist state");
        }
        *self.state.lock().expect("state lock") = record;
    }

    /// Moves to `to` when the current state is one of `from`. The check and
    /// the move happen under one lock, so concurrent callers see exactly one
    /// winner.
    fn transition(&self, from: &[SessionState], to: SessionState) -> Result<StateRecord, SessionState> {
        let mut guard = self.state.lock().expect("state lock");
        if !from.contains(&guard.state) {
            return Err(guard.state);
        }
        let previous = guard.clone();
        *guard = StateRecord { state: to, message: None, progress: None };
        if let Err(e) = self.dir.save_state(&guard) {
            warn!(session = %self.config.session_id, error = %e, "could not persist state");
        }
        Ok(previous)
    }

    pub fn emit(&self, level: Level, message: impl Into<String>, frame: Option<u32>, fps: Option<f64>) {
        let mut ev = self.events.lock().expect("events lock");
        let timestamp = unix_millis().max(ev.last_timestamp);
        ev.last_timestamp = timestamp;
        let event = StatusEvent {
            session_id: self.config.session_id.clone(),
            timestamp,
            level,
            message: message.into(),
            frame,
            fps,
        };
        if ev.backlog.len() == EVENT_BACKLOG {
            ev.backlog.pop_front();
        }
        ev.backlog.push_back(event.clone());
        // no receivers is fine
        let _ = self.sender.send(event);
    }

    /// Backlog plus a receiver for everything after it.
    pub fn subscribe(&self) -> (Vec<StatusEvent>, broadcast::Receiver<StatusEvent>) {
        let ev = self.events.lock().expect("events lock");
        (ev.backlog.iter().cloned().collect(), self.sender.subscribe())
    }

    /// Progress callback that persists progress and emits events at the
    /// configured cadence.
    fn progress_reporter<'a>(&'a self, label: &'a str) -> impl FnMut(Progress) -> bool + 'a {
        let mut last_emit = Instant::now();
        move |p: Progress| {
            let done = p.frame + 1;
            if done.is_multiple_of(PROGRESS_EVERY_FRAMES)
                || last_emit.elapsed() >= PROGRESS_EVERY
                || done == p.frames_total
            {
                last_emit = Instant::now();
                let mut st = self.state();
                st.progress = Some(ProgressRecord::from(p));
                self.set_state(st);
                self.emit(Level::Info, format!("{label}: frame {done}/{}", p.frames_total), Some(p.frame), Some(p.fps));
            }
            true
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    root: PathBuf,
    sessions: Mutex<HashMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    /// Opens the data directory and loads every session found in it.
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(&root)? {
            let entry = entry?;
            let dir = SessionDir::new(entry.path());
            if !dir.exists() {
                continue;
            }
            match SessionHandle::load(dir) {
                Ok(h) => {
                    sessions.insert(h.config.session_id.clone(), Arc::new(h));
                }
                Err(e) => warn!(path = %entry.path().display(), error = %e, "skipping unreadable session"),
            }
        }
        info!(root = %root.display(), sessions = sessions.len(), "data directory loaded");
        Ok(Self { inner: Arc::new(Inner { root, sessions: Mutex::new(sessions) }) })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    pub fn session(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.inner.sessions.lock().expect("sessions lock").get(id).cloned()
    }

    fn get(&self, id: &str) -> ApiResult<Arc<SessionHandle>> {
        self.session(id).ok_or_else(|| ApiError::not_found(id))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/sessions", post(create))
        .route("/api/sessions/{id}", get(show))
        .route("/api/sessions/{id}/frame/{index}", get(frame))
        .route("/api/sessions/{id}/mask", put(put_mask))
        .route("/api/sessions/{id}/zones", put(put_zones))
        .route("/api/sessions/{id}/run", post(run))
        .route("/api/sessions/{id}/count", post(count))
        .route("/api/sessions/{id}/eval", post(eval))
        .route("/api/sessions/{id}/counts", get(counts))
        .route("/api/sessions/{id}/gallery", get(gallery))
        .route("/api/sessions/{id}/events", get(events))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, SessionError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker panicked: {e}"))),
    }
}

async fn create(State(app): State<AppState>, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = SessionDir::new(app.root().join(&id));
    let sid = id.clone();
    let created = blocking(move || {
        let result = session::create_session(&dir, &sid, &req);
        if result.is_err() && dir.root().exists() {
            let _ = std::fs::remove_dir_all(dir.root());
        }
        result?;
        SessionHandle::load(dir)
    })
    .await?;
    let handle = Arc::new(created);
    handle.emit(Level::Info, "session created", None, None);
    app.inner.sessions.lock().expect("sessions lock").insert(id.clone(), handle);
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

/// JSON view of a session for `GET /api/sessions/{id}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub state: SessionState,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub progress: Option<ProgressRecord>,
    pub config: SessionConfig,
    pub has_frames: bool,
    pub has_cache: bool,
    pub mask: Vec<Polygon>,
    pub zones: ZoneConfig,
    pub count_runs: usize,
    pub has_report: bool,
}

async fn show(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let h = app.get(&id)?;
    let view = blocking(move || {
        let st = h.state();
        Ok(SessionView {
            session_id: h.config.session_id.clone(),
            state: st.state,
            message: st.message,
            progress: st.progress,
            config: h.config.clone(),
            has_frames: h.frames.is_some(),
            has_cache: h.dir.has_cache(),
            mask: h.dir.mask()?,
            zones: h.dir.zones()?,
            count_runs: h.dir.count_runs()?.len(),
            has_report: h.dir.path(session::REPORT_FILE).exists(),
        })
    })
    .await?;
    Ok(Json(view))
}

async fn frame(State(app): State<AppState>, UrlPath((id, index)): UrlPath<(String, u32)>) -> ApiResult<Response> {
    let h = app.get(&id)?;
    if h.frames.is_none() {
        return Err(ApiError::conflict("session has no frame images"));
    }
    let png = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> {
        let src = h.frames.as_ref().expect("checked above");
        if index >= src.info().frame_count {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("frame {index} out of range")));
        }
        let img = src
            .frame(index)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
            .ok_or_else(|| ApiError::conflict("session has no frame images"))?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok(buf.into_inner())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(png)).into_response())
}

async fn put_mask(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<Vec<Polygon>>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Json(mask) = body?;
    let h = app.get(&id)?;
    let idle = [SessionState::Created, SessionState::Cached, SessionState::Done, SessionState::Failed];
    // Counting blocks other writers while the mask is replaced.
    let previous =
        h.transition(&idle, SessionState::Counting).map_err(|s| ApiError::conflict(format!("session is {s:?}")))?;
    let h2 = h.clone();
    let result = blocking(move || {
        let current = h2.dir.mask()?;
        if current == mask {
            return Ok(false);
        }
        session::save_mask(&h2.dir, &h2.config, &mask)?;
        let had_cache = h2.dir.has_cache();
        if had_cache {
            std::fs::remove_file(h2.dir.cache_path())?;
        }
        Ok(had_cache)
    })
    .await;
    match result {
        Ok(true) => {
            h.set_state(StateRecord { state: SessionState::Created, message: None, progress: None });
            h.emit(Level::Warn, "mask changed; cache discarded, run again", None, None);
            Ok(Json(json!({ "changed": true, "cache_discarded": true })))
        }
        Ok(false) => {
            h.set_state(previous);
            Ok(Json(json!({ "changed": false, "cache_discarded": false })))
        }
        Err(e) => {
            h.set_state(previous);
            Err(e)
        }
    }
}

async fn put_zones(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ZoneConfig>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Json(zones) = body?;
    let h = app.get(&id)?;
    zones.validate().map_err(|e| ApiError::from(SessionError::Counting(e)))?;
    blocking(move || {
        if h.dir.zones()? == zones {
            return Ok(Json(json!({ "changed": false })));
        }
        h.dir.save_zones(&zones)?;
        Ok(Json(json!({ "changed": true })))
    })
    .await
}

async fn run(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let h = app.get(&id)?;
    let startable = [SessionState::Created, SessionState::Cached, SessionState::Done, SessionState::Failed];
    h.transition(&startable, SessionState::Running)
        .map_err(|s| ApiError::conflict(format!("run rejected: session is {s:?}")))?;
    h.emit(Level::Info, "run started", None, None);
    let worker = h.clone();
    tokio::task::spawn_blocking(move || {
        let h = worker;
        let result = {
            let mut report = h.progress_reporter("run");
            session::run_pipeline(&h.dir, &h.config, None, &mut report)
        };
        match result {
            Ok(out) => {
                let progress = h.state().progress;
                h.set_state(StateRecord { state: SessionState::Cached, message: None, progress });
                let bytes = out.cache_bytes.unwrap_or(0);
                h.emit(
                    Level::Info,
                    format!("run finished: {} frames cached ({bytes} bytes)", out.frames.len()),
                    None,
                    None,
                );
            }
            Err(e) => {
                let msg = e.to_string();
                let progress = h.state().progress;
                h.set_state(StateRecord { state: SessionState::Failed, message: Some(msg.clone()), progress });
                h.emit(Level::Error, format!("run failed: {msg}"), None, None);
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "accepted": true }))).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRequest {
    #[serde(default)]
    pub method: Option<CountMethod>,
    #[serde(default)]
    pub mode: CountMode,
    /// Zones for this call only; the stored zones are used otherwise.
    #[serde(default)]
    pub zones: Option<ZoneConfig>,
}

async fn count(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<CountRequest>, JsonRejection>,
) -> ApiResult<Json<CountRun>> {
    let Json(req) = body?;
    let h = app.get(&id)?;
    let allowed: &[SessionState] = match req.mode {
        CountMode::Quick => &[SessionState::Cached, SessionState::Done],
        CountMode::Full => &[SessionState::Created, SessionState::Cached, SessionState::Done, SessionState::Failed],
    };
    let previous = h.transition(allowed, SessionState::Counting).map_err(|s| match (req.mode, s) {
        (CountMode::Quick, SessionState::Created | SessionState::Failed) => ApiError::from(SessionError::NoCache),
        _ => ApiError::conflict(format!("count rejected: session is {s:?}")),
    })?;
    h.emit(Level::Info, format!("{:?} count started", req.mode).to_lowercase(), None, None);
    let worker = h.clone();
    let result = blocking(move || {
        let h = worker;
        let zones = match req.zones {
            Some(z) => z,
            None => h.dir.zones()?,
        };
        let mut report = h.progress_reporter("count");
        session::count(&h.dir, &h.config, &zones, req.method, req.mode, &mut report)
    })
    .await;
    match result {
        Ok(run) => {
            h.set_state(StateRecord { state: SessionState::Done, message: None, progress: h.state().progress });
            let totals = run
                .totals()
                .map(|t| t.iter().map(|(c, n)| format!("{}={n}", c.name())).collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            h.emit(Level::Info, format!("count run {} finished: {totals}", run.run), None, None);
            Ok(Json(run))
        }
        Err(e) => {
            // a failed full count may have removed the cache
            if req.mode == CountMode::Full && !h.dir.has_cache() {
                h.set_state(StateRecord {
                    state: SessionState::Failed,
                    message: Some(e.message.clone()),
                    progress: None,
                });
            } else {
                h.set_state(previous);
            }
            h.emit(Level::Error, format!("count failed: {}", e.message), None, None);
            Err(e)
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub gt_path: PathBuf,
}

async fn eval(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<EvalRequest>, JsonRejection>,
) -> ApiResult<Json<aiv_core::metrics::EvalReport>> {
    let Json(req) = body?;
    let h = app.get(&id)?;
    let st = h.state().state;
    if !matches!(st, SessionState::Cached | SessionState::Done) {
        return Err(match st {
            SessionState::Created | SessionState::Failed => ApiError::from(SessionError::NoCache),
            other => ApiError::conflict(format!("eval rejected: session is {other:?}")),
        });
    }
    let worker = h.clone();
    let report = blocking(move || session::eval(&worker.dir, &req.gt_path)).await?;
    h.emit(Level::Info, "evaluation report stored", None, None);
    Ok(Json(report))
}

async fn counts(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let h = app.get(&id)?;
    let history = blocking(move || h.dir.count_runs()).await?;
    Ok(Json(json!({ "latest": history.last(), "history": history })))
}

async fn gallery(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let h = app.get(&id)?;
    let templates: Vec<TemplateRecord> = blocking(move || {
        load_index(h.dir.gallery_dir())
            .map_err(|e| SessionError::File { path: h.dir.gallery_dir().display().to_string(), msg: e.to_string() })
    })
    .await?;
    Ok(Json(json!({ "enabled": app.get(&id)?.config.gallery, "templates": templates })))
}

fn sse_event(ev: &StatusEvent) -> Event {
    Event::default().event("status").json_data(ev).expect("status events serialize")
}

async fn events(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let h = app.get(&id)?;
    let (backlog, rx) = h.subscribe();
    let replayed = stream::iter(backlog.into_iter().map(|ev| Ok(sse_event(&ev))));
    let live = stream::unfold(rx, |mut rx| async move {
        let event = match rx.recv().await {
            Ok(ev) => sse_event(&ev),
            Err(broadcast::error::RecvError::Lagged(n)) => Event::default().event("lagged").data(n.to_string()),
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(event), rx))
    });
    Ok(Sse::new(futures::StreamExt::chain(replayed, live)).keep_alive(KeepAlive::default()))
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
