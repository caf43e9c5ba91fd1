//! HTTP session service.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex as AsyncMutex;

use iceedit_core::engines::{load_checkpoint, Engine};
use iceedit_core::harness::{model_dir, EngineId, DESK_SIGMA};
use iceedit_core::interaction::{EditConfig, PixelScribble};
use iceedit_core::phantom::{load_case, CaseBundle};
use iceedit_core::session::{frame_image, Session, SessionLog};
use iceedit_core::Error;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub case_dir: PathBuf,
    pub checkpoint_dir: Option<PathBuf>,
    /// Scribble logs are written here after every change when set.
    pub session_dir: Option<PathBuf>,
    pub edit: EditConfig,
}

impl ServiceConfig {
    pub fn new(case_dir: impl Into<PathBuf>) -> Self {
        Self {
            case_dir: case_dir.into(),
            checkpoint_dir: None,
            session_dir: None,
            edit: EditConfig {
                sigma_enc: DESK_SIGMA,
                sigma_edit: DESK_SIGMA,
                ..EditConfig::default()
            },
        }
    }
}

struct SessionEntry {
    case: Arc<CaseBundle>,
    session: Arc<AsyncMutex<Session>>,
}

pub struct AppState {
    config: ServiceConfig,
    cases: Mutex<HashMap<String, Arc<CaseBundle>>>,
    engines: Mutex<HashMap<EngineId, Arc<Engine>>>,
    sessions: Mutex<HashMap<String, Arc<SessionEntry>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            cases: Mutex::new(HashMap::new()),
            engines: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(0),
        })
    }

    /// Lock handle of one session; mostly useful to tests.
    pub fn session_handle(&self, id: &str) -> Option<Arc<AsyncMutex<Session>>> {
        self.sessions.lock().unwrap().get(id).map(|e| e.session.clone())
    }

    fn entry(&self, id: &str) -> Result<Arc<SessionEntry>, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session {id}")))
    }

    fn case(&self, id: &str) -> Result<Arc<CaseBundle>, ApiError> {
        if let Some(c) = self.cases.lock().unwrap().get(id) {
            return Ok(c.clone());
        }
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        let dir = self.config.case_dir.join(id);
        if !valid || !dir.join("manifest.json").exists() {
            return Err(ApiError::not_found("unknown_case", format!("no case {id:?} in {}", self.config.case_dir.display())));
        }
        let case = Arc::new(load_case(&dir).map_err(ApiError::from)?);
        self.cases.lock().unwrap().insert(id.to_string(), case.clone());
        Ok(case)
    }

    /// Engines usable right now: the built-in ones plus every learned engine
    /// with a checkpoint on disk.
    pub fn available_engines(&self) -> Vec<EngineId> {
        EngineId::ALL
            .into_iter()
            .filter(|id| match (id.loss_kind(), &self.config.checkpoint_dir) {
                (None, _) => true,
                (Some(kind), Some(dir)) => model_dir(dir, kind).join("manifest.json").exists(),
                (Some(_), None) => false,
            })
            .collect()
    }

    fn engine(&self, name: &str) -> Result<(EngineId, Arc<Engine>), ApiError> {
        let available = self.available_engines();
        let unknown = || {
            let names: Vec<&str> = available.iter().map(EngineId::as_str).collect();
            ApiError::not_found("unknown_engine", format!("unknown engine {name:?}; available: {}", names.join(", ")))
        };
        let id: EngineId = name.parse().map_err(|_| unknown())?;
        if !available.contains(&id) {
            return Err(unknown());
        }
        if let Some(e) = self.engines.lock().unwrap().get(&id) {
            return Ok((id, e.clone()));
        }
        let engine = match id.loss_kind() {
            None if id == EngineId::NoEdit => Engine::NoEdit,
            None => Engine::Geometric,
            Some(kind) => {
                let dir = model_dir(self.config.checkpoint_dir.as_deref().expect("checked above"), kind);
                let (model, _) = load_checkpoint(&dir)?;
                Engine::Cnn {
                    name: id.as_str().into(),
                    model: Box::new(model),
                }
            }
        };
        let engine = Arc::new(engine);
        self.engines.lock().unwrap().insert(id, engine.clone());
        Ok((id, engine))
    }

    fn persist(&self, id: &str, log: &SessionLog) -> Result<(), ApiError> {
        if let Some(dir) = &self.config.session_dir {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
            std::fs::write(dir.join(format!("{id}.json")), serde_json::to_vec_pretty(log).map_err(Error::from)?)
                .map_err(Error::from)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn not_found(code: &'static str, message: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code,
            message,
        }
    }

    fn conflict() -> Self {
        Self {
            status: StatusCode::CONFLICT,
            code: "conflict",
            message: "another edit on this session is in progress".into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::InvalidScribble(_) | Error::EmptyScribble => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_scribble"),
            Error::UnknownFrame(_) => (StatusCode::NOT_FOUND, "unknown_frame"),
            Error::NothingToUndo => (StatusCode::CONFLICT, "nothing_to_undo"),
            Error::InvalidParams(_) | Error::OutOfRange(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            Error::NoPredictedSurface | Error::DegenerateMask => (StatusCode::UNPROCESSABLE_ENTITY, "degenerate_prediction"),
            Error::MissingArtifact(_) | Error::MissingMember(_) => (StatusCode::NOT_FOUND, "missing_artifact"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Deserialize)]
struct CreateSession {
    case: String,
    #[serde(default = "default_engine")]
    engine: String,
}

fn default_engine() -> String {
    EngineId::Geometric.as_str().into()
}

#[derive(Serialize)]
struct Created {
    session_id: String,
}

async fn create_session(State(app): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> ApiResult<Json<Created>> {
    let case = app.case(&req.case)?;
    let (engine_id, engine) = app.engine(&req.engine)?;
    let session = Session::new(case.clone(), engine_id, engine, app.config.edit)?;
    let id = format!("s{:04}", app.next_id.fetch_add(1, Ordering::SeqCst));
    let entry = Arc::new(SessionEntry {
        case,
        session: Arc::new(AsyncMutex::new(session)),
    });
    app.sessions.lock().unwrap().insert(id.clone(), entry);
    tracing::info!(session = %id, case = %req.case, engine = %engine_id, "session created");
    Ok(Json(Created { session_id: id }))
}

async fn frames(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let entry = app.entry(&id)?;
    let s = entry.session.lock().await;
    Ok(Json(s.frames()))
}

/// 8-bit grey level of an intensity in [0, 1], rounded half up.
pub fn to_gray(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_png(rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, cols as u32, rows as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("png header into memory");
        let data: Vec<u8> = values.iter().map(|&v| to_gray(v)).collect();
        w.write_image_data(&data).expect("png data into memory");
    }
    out
}

async fn frame_png(State(app): State<Arc<AppState>>, UrlPath((id, f)): UrlPath<(String, usize)>) -> ApiResult<Response> {
    let case = app.entry(&id)?.case.clone();
    let (rows, cols, values) = frame_image(&case, f)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], encode_png(rows, cols, &values)).into_response())
}

async fn frame_grid(State(app): State<Arc<AppState>>, UrlPath((id, f)): UrlPath<(String, usize)>) -> ApiResult<impl IntoResponse> {
    let case = app.entry(&id)?.case.clone();
    let (rows, cols, values) = frame_image(&case, f)?;
    Ok(Json(json!({"frame_id": f, "rows": rows, "cols": cols, "values": values})))
}

async fn contours(State(app): State<Arc<AppState>>, UrlPath((id, f)): UrlPath<(String, usize)>) -> ApiResult<impl IntoResponse> {
    let entry = app.entry(&id)?;
    let s = entry.session.lock().await;
    Ok(Json(s.frame_contours(f)?))
}

/// Runs a mutation on a session unless another one holds it.
async fn mutate<T: Send + 'static>(
    app: &Arc<AppState>,
    id: &str,
    f: impl FnOnce(&mut Session) -> iceedit_core::Result<T> + Send + 'static,
) -> ApiResult<T> {
    let entry = app.entry(id)?;
    let mut guard = entry.session.clone().try_lock_owned().map_err(|_| ApiError::conflict())?;
    let (out, log) = tokio::task::spawn_blocking(move || {
        let out = f(&mut guard);
        (out, guard.log())
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "internal",
        message: e.to_string(),
    })?;
    let out = out?;
    app.persist(id, &log)?;
    Ok(out)
}

async fn submit_edit(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(scribble): Json<PixelScribble>,
) -> ApiResult<impl IntoResponse> {
    let out = mutate(&app, &id, move |s| s.submit(&scribble)).await?;
    Ok(Json(out))
}

async fn undo(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(mutate(&app, &id, |s| s.undo()).await?))
}

async fn metrics(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let entry = app.entry(&id)?;
    let s = entry.session.lock().await;
    Ok(Json(s.metrics()))
}

/// Current mask plus the scribble log that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub log: SessionLog,
    pub dims: [usize; 3],
    pub mask_base64: String,
    pub mask_crc32: u32,
}

async fn export(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let entry = app.entry(&id)?;
    let s = entry.session.lock().await;
    let bytes = s.current().as_bytes();
    Ok(Json(Export {
        log: s.log(),
        dims: s.case.meta.dims,
        mask_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        mask_crc32: crc32fast::hash(bytes),
    }))
}

async fn engines(State(app): State<Arc<AppState>>) -> impl IntoResponse {
    Json(app.available_engines())
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/engines", get(engines))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/:id/frames", get(frames))
        .route("/api/sessions/:id/frames/:f/image.png", get(frame_png))
        .route("/api/sessions/:id/frames/:f/image", get(frame_grid))
        .route("/api/sessions/:id/frames/:f/contours", get(contours))
        .route("/api/sessions/:id/edits", post(submit_edit))
        .route("/api/sessions/:id/undo", post(undo))
        .route("/api/sessions/:id/metrics", get(metrics))
        .route("/api/sessions/:id/export", get(export))
        .with_state(app)
}

/// Router with `static_dir` served for every path outside `/api`.
pub fn router_with_assets(app: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let r = router(app);
    match static_dir {
        Some(dir) => r.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => r,
    }
}

pub async fn serve(config: ServiceConfig, bind: &str, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let app = AppState::new(config);
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router_with_assets(app, static_dir.as_deref())).await?;
    Ok(())
}
