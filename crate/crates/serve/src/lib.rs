//! HTTP inference service: one model, one worker, live capture sessions.
//!
//! Endpoints: `POST /session/start`, `POST /session/label`,
//! `POST /capture`, `GET /verdict/latest`, `POST /demo/outcome`,
//! `GET /health`, plus `POST /classify` for scoring a saved frame.

pub mod session;
pub mod worker;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use spillsense_core::frame::{ClassLabel, Frame, Liquid, Modality, Room, SessionMeta};
use spillsense_core::geometry::Calibration;
use spillsense_core::source::{capture_pair, open_source, Source, SourceDescriptor, DEFAULT_MAX_SKEW_MS};
use tokio::sync::{mpsc, oneshot, Mutex};

pub use session::{ClassVerdict, Session};
pub use worker::{BoxedModel, Input, ModelLoader, Readiness, QUEUE_DEPTH};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("cannot open source: {0}")]
    Source(#[from] spillsense_core::source::SourceError),
    #[error("calibration: {0}")]
    Calibration(#[from] spillsense_core::geometry::GeometryError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model_dir: PathBuf,
    pub modality: Modality,
    pub calib_path: Option<PathBuf>,
    pub listen: SocketAddr,
    pub session_root: PathBuf,
    pub thermal_source: SourceDescriptor,
    pub rgb_source: SourceDescriptor,
    pub max_skew_ms: u64,
}

impl ServiceConfig {
    pub fn new(model_dir: impl Into<PathBuf>, modality: Modality, session_root: impl Into<PathBuf>) -> Self {
        Self {
            model_dir: model_dir.into(),
            modality,
            calib_path: None,
            listen: SocketAddr::from(([127, 0, 0, 1], 8750)),
            session_root: session_root.into(),
            thermal_source: SourceDescriptor::Simulated { seed: 0 },
            rgb_source: SourceDescriptor::Simulated { seed: 0 },
            max_skew_ms: DEFAULT_MAX_SKEW_MS,
        }
    }
}

struct CaptureState {
    thermal: Box<dyn Source>,
    rgb: Box<dyn Source>,
    session: Option<Session>,
}

pub struct AppState {
    config: ServiceConfig,
    started: Instant,
    started_at: DateTime<Utc>,
    readiness: Arc<RwLock<Readiness>>,
    jobs: mpsc::Sender<worker::Job>,
    capture: Mutex<CaptureState>,
    latest: RwLock<Option<ClassVerdict>>,
    classify_seq: AtomicU64,
}

impl AppState {
    pub fn readiness(&self) -> Readiness {
        self.readiness.read().expect("readiness lock").clone()
    }
}

/// Validate the config, open sources and start loading the model in the
/// background.
pub fn start(config: ServiceConfig, loader: ModelLoader) -> Result<Arc<AppState>, ServeError> {
    let calib = match (&config.calib_path, config.modality) {
        (Some(p), _) => Some(Calibration::load(p)?),
        (None, Modality::Combined) => {
            return Err(ServeError::Config("combined modality requires --calib".into()));
        }
        (None, _) => None,
    };
    std::fs::create_dir_all(&config.session_root)?;
    let thermal = open_source(&config.thermal_source, Modality::Thermal)?;
    let rgb = open_source(&config.rgb_source, Modality::Rgb)?;
    let readiness = Arc::new(RwLock::new(Readiness::Loading));
    let jobs = worker::spawn(loader, config.modality, calib, readiness.clone());
    Ok(Arc::new(AppState {
        config,
        started: Instant::now(),
        started_at: Utc::now(),
        readiness,
        jobs,
        capture: Mutex::new(CaptureState {
            thermal,
            rgb,
            session: None,
        }),
        latest: RwLock::new(None),
        classify_seq: AtomicU64::new(0),
    }))
}

/// Loader for a training output directory.
pub fn trained_model_loader(dir: &Path) -> ModelLoader {
    let dir = dir.to_path_buf();
    Box::new(move || {
        spillsense_train::TrainedModel::load(&dir)
            .map(|m| Box::new(m) as BoxedModel)
            .map_err(|e| e.to_string())
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session/start", post(session_start))
        .route("/session/label", post(session_label))
        .route("/capture", post(capture))
        .route("/verdict/latest", get(verdict_latest))
        .route("/demo/outcome", post(demo_outcome))
        .route("/classify", post(classify))
        .with_state(state)
}

/// Bind and serve until the process is stopped.
pub async fn run(config: ServiceConfig) -> Result<(), ServeError> {
    let listen = config.listen;
    let loader = trained_model_loader(&config.model_dir);
    let state = start(config, loader)?;
    let listener = tokio::net::TcpListener::bind(listen).await?;
    serve_listener(listener, state).await
}

/// Serve on an already bound listener.
pub async fn serve_listener(listener: tokio::net::TcpListener, state: Arc<AppState>) -> Result<(), ServeError> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn ready(state: &AppState) -> Result<(String, Modality), ApiError> {
    match state.readiness() {
        Readiness::Ready { model, modality } => Ok((model, modality)),
        Readiness::Loading => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is loading")),
        Readiness::Failed(e) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("model failed to load: {e}"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub model: String,
    pub modality: Modality,
    /// Seconds since start.
    pub uptime: f64,
    pub started_at: DateTime<Utc>,
}

async fn health(State(state): State<Arc<AppState>>) -> ApiResult<Health> {
    let (model, modality) = ready(&state)?;
    Ok(Json(Health {
        model,
        modality,
        uptime: state.started.elapsed().as_secs_f64(),
        started_at: state.started_at,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartRequest {
    pub room: Room,
    pub liquid: Liquid,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartResponse {
    pub session_id: String,
}

fn session_id(room: &Room, liquid: &Liquid, now: DateTime<Utc>) -> String {
    format!("{}-{}-{}", room.as_str(), liquid.as_str(), now.format("%Y%m%dT%H%M%S%3fZ"))
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

async fn session_start(
    State(state): State<Arc<AppState>>,
    body: Result<Json<StartRequest>, JsonRejection>,
) -> ApiResult<StartResponse> {
    let Json(req) = body?;
    let id = session_id(&req.room, &req.liquid, Utc::now());
    let meta = SessionMeta::new(id.clone(), req.room, req.liquid, ClassLabel::NoSpill)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let session = Session::open(&state.config.session_root, meta)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    state.capture.lock().await.session = Some(session);
    log::info!("session {id} started");
    Ok(Json(StartResponse { session_id: id }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub class_label: ClassLabel,
}

async fn session_label(
    State(state): State<Arc<AppState>>,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> ApiResult<serde_json::Value> {
    let Json(req) = body?;
    let mut cap = state.capture.lock().await;
    let session = cap
        .session
        .as_mut()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no active session"))?;
    session.set_label(req.class_label);
    Ok(Json(json!({
        "session_id": session.meta().session_id,
        "class_label": req.class_label,
    })))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaptureResponse {
    pub pair_index: u64,
    pub thermal_path: PathBuf,
    pub rgb_path: PathBuf,
    pub verdict: ClassVerdict,
}

/// Reserve a queue slot or fail with 429 (full) / 503 (worker gone).
async fn reserve(state: &AppState) -> Result<mpsc::Permit<'_, worker::Job>, ApiError> {
    state.jobs.try_reserve().map_err(|e| match e {
        mpsc::error::TrySendError::Full(()) => ApiError::new(StatusCode::TOO_MANY_REQUESTS, "inference queue is full"),
        mpsc::error::TrySendError::Closed(()) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "inference worker stopped"),
    })
}

async fn infer(permit: mpsc::Permit<'_, worker::Job>, input: Input, frame_ref: u64) -> Result<ClassVerdict, ApiError> {
    let (tx, rx) = oneshot::channel();
    permit.send(worker::Job {
        input,
        frame_ref,
        reply: tx,
    });
    rx.await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "inference worker stopped"))?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e))
}

async fn capture(State(state): State<Arc<AppState>>) -> ApiResult<CaptureResponse> {
    ready(&state)?;
    let mut guard = state.capture.lock().await;
    let cap = &mut *guard;
    let session = cap
        .session
        .as_mut()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no active session"))?;
    let permit = reserve(&state).await?;
    let pair = capture_pair(
        cap.thermal.as_mut(),
        cap.rgb.as_mut(),
        state.config.max_skew_ms,
        &session.meta().session_id,
    )
    .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
    let (pair_index, thermal_path, rgb_path) = session
        .save_pair(&pair)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let verdict = infer(permit, Input::Pair(pair), pair_index).await?;
    session
        .record_verdict(verdict.clone(), thermal_path.clone(), rgb_path.clone())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    *state.latest.write().expect("latest lock") = Some(verdict.clone());
    Ok(Json(CaptureResponse {
        pair_index,
        thermal_path,
        rgb_path,
        verdict,
    }))
}

async fn verdict_latest(State(state): State<Arc<AppState>>) -> ApiResult<ClassVerdict> {
    state
        .latest
        .read()
        .expect("latest lock")
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no verdict yet"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutcomeRequest {
    pub frame_ref: u64,
    pub ground_truth: ClassLabel,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutcomeResponse {
    /// Null until at least one verdict is labelled.
    pub demo_accuracy: Option<f64>,
}

async fn demo_outcome(
    State(state): State<Arc<AppState>>,
    body: Result<Json<OutcomeRequest>, JsonRejection>,
) -> ApiResult<OutcomeResponse> {
    let Json(req) = body?;
    let mut cap = state.capture.lock().await;
    let session = cap
        .session
        .as_mut()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no active session"))?;
    let demo_accuracy = session.record_outcome(req.frame_ref, req.ground_truth).map_err(|e| match e {
        session::SessionError::UnknownFrame(_) => ApiError::new(StatusCode::NOT_FOUND, e.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    })?;
    Ok(Json(OutcomeResponse { demo_accuracy }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub path: PathBuf,
}

/// Score a frame already on disk. Does not touch the session log.
async fn classify(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ClassifyRequest>, JsonRejection>,
) -> ApiResult<ClassVerdict> {
    let Json(req) = body?;
    let (_, modality) = ready(&state)?;
    let frame = Frame::load_png(&req.path, modality).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let permit = reserve(&state).await?;
    let frame_ref = state.classify_seq.fetch_add(1, Ordering::SeqCst) + 1;
    Ok(Json(infer(permit, Input::Frame(frame), frame_ref).await?))
}
