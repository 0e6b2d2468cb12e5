//! HTTP+JSON service for live elicitation sessions.
//!
//! Each session lives in its own directory under the data directory, with an
//! append-only `events.ndjson` log from which the whole session state is
//! rebuilt on startup. Fits run on a bounded pool of blocking workers and
//! publish immutable snapshots that the getters read.

pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex, Semaphore};
use tower_http::cors::{Any, CorsLayer};

pub use session::{FitRequest, FitSnapshot, FitStatus, Pair, Session, SessionError, SessionSpec, Winner};

pub const API_SCHEMA: &str = "belief-api-v1";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_dir: PathBuf,
    /// Concurrent fit jobs across all sessions.
    pub fit_workers: usize,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            data_dir: PathBuf::from("belief-data"),
            fit_workers: 1,
            cors_origin: None,
        }
    }
}

impl ServiceConfig {
    /// Reads `BELIEF_PORT`, `BELIEF_DATA_DIR`, `BELIEF_FIT_WORKERS` and
    /// `BELIEF_CORS_ORIGIN`, falling back to the defaults.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Some(p) = std::env::var("BELIEF_PORT").ok().and_then(|v| v.parse().ok()) {
            cfg.port = p;
        }
        if let Ok(d) = std::env::var("BELIEF_DATA_DIR") {
            cfg.data_dir = PathBuf::from(d);
        }
        if let Some(w) = std::env::var("BELIEF_FIT_WORKERS").ok().and_then(|v| v.parse().ok()) {
            cfg.fit_workers = std::cmp::max(w, 1);
        }
        cfg.cors_origin = std::env::var("BELIEF_CORS_ORIGIN").ok();
        cfg
    }
}

struct Handle {
    session: Mutex<Session>,
    snapshot: RwLock<Option<Arc<FitSnapshot>>>,
}

impl Handle {
    fn snapshot(&self) -> Option<Arc<FitSnapshot>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }
}

struct Inner {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Handle>>>,
    fit_pool: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Opens the data directory and replays every session found in it.
    pub fn open(config: ServiceConfig) -> Result<Self, SessionError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(&config.data_dir)? {
            let dir = entry?.path();
            if !dir.join("events.ndjson").exists() {
                continue;
            }
            let (session, snapshot) = Session::replay(&dir)?;
            sessions.insert(
                session.id.clone(),
                Arc::new(Handle {
                    session: Mutex::new(session),
                    snapshot: RwLock::new(snapshot.map(Arc::new)),
                }),
            );
        }
        Ok(Self(Arc::new(Inner {
            fit_pool: Arc::new(Semaphore::new(config.fit_workers.max(1))),
            config,
            sessions: RwLock::new(sessions),
        })))
    }

    fn handle(&self, id: &str) -> Result<Arc<Handle>, ApiError> {
        self.0
            .sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown-session", format!("no session '{id}'")))
    }

    pub fn session_count(&self) -> usize {
        self.0.sessions.read().expect("sessions lock").len()
    }
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (status, code) = match &e {
            SessionError::InvalidSpec(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid-spec"),
            SessionError::StalePair { .. } => (StatusCode::CONFLICT, "stale-pair"),
            SessionError::TooFewAnswers(_) => (StatusCode::UNPROCESSABLE_ENTITY, "too-few-answers"),
            SessionError::Busy => (StatusCode::CONFLICT, "busy"),
            SessionError::NotReady => (StatusCode::CONFLICT, "not-ready"),
            SessionError::Core(belief_core::Error::Config(_)) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid-config"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"schema": API_SCHEMA, "error": self.code, "message": self.message})),
        )
            .into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

pub fn router(state: AppState) -> Router {
    let cors = match &state.0.config.cors_origin {
        Some(origin) => match origin.parse::<HeaderValue>() {
            Ok(v) => CorsLayer::new().allow_origin(v),
            Err(_) => CorsLayer::new().allow_origin(Any),
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id/pair", get(next_pair))
        .route("/sessions/:id/answer", post(record_answer))
        .route("/sessions/:id/fit", post(start_fit))
        .route("/sessions/:id/status", get(status))
        .route("/sessions/:id/samples", get(samples))
        .route("/sessions/:id/grids", get(grids))
        .route("/sessions/:id/dataset", get(dataset))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let state = AppState::open(config).map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn status_json(s: &Session) -> Value {
    json!({
        "schema": API_SCHEMA,
        "id": s.id,
        "d": s.spec.dim(),
        "labels": s.spec.labels,
        "units": s.spec.units,
        "lower": s.spec.lower,
        "upper": s.spec.upper,
        "s": s.spec.s,
        "answers": s.answer_count(),
        "queue_len": s.queue_len(),
        "fit": s.status,
    })
}

fn pair_json(p: &Pair) -> Value {
    json!({"schema": API_SCHEMA, "pair_id": p.pair_id, "first": p.first, "second": p.second})
}

async fn create_session(State(state): State<AppState>, body: Result<Json<SessionSpec>, axum::extract::rejection::JsonRejection>) -> ApiResult {
    let Json(spec) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-spec", e.body_text()))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::create(spec, id.clone(), &state.0.config.data_dir)?;
    let body = status_json(&session);
    state.0.sessions.write().expect("sessions lock").insert(
        id,
        Arc::new(Handle {
            session: Mutex::new(session),
            snapshot: RwLock::new(None),
        }),
    );
    Ok(Json(body))
}

async fn next_pair(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let h = state.handle(&id)?;
    let s = h.session.lock().await;
    Ok(Json(pair_json(s.pending())))
}

#[derive(Deserialize)]
struct AnswerBody {
    pair_id: u64,
    winner: Winner,
}

async fn record_answer(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<AnswerBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-answer", e.body_text()))?;
    let h = state.handle(&id)?;
    let mut s = h.session.lock().await;
    s.answer(body.pair_id, body.winner)?;
    Ok(Json(json!({
        "schema": API_SCHEMA,
        "answers": s.answer_count(),
        "next": pair_json(s.pending()),
    })))
}

async fn start_fit(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<FitRequest>>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let request = body.map(|Json(r)| r).unwrap_or_default();
    let h = state.handle(&id)?;
    let job = {
        let mut s = h.session.lock().await;
        s.begin_fit(request)?
    };
    let pool = state.0.fit_pool.clone();
    let handle = h.clone();
    tokio::spawn(async move {
        let _permit = pool.acquire_owned().await.expect("fit pool closed");
        let job = Arc::new(job);
        let runner = job.clone();
        let outcome = tokio::task::spawn_blocking(move || runner.run())
            .await
            .unwrap_or_else(|e| Err(SessionError::Log(format!("fit worker panicked: {e}"))));
        let mut s = handle.session.lock().await;
        if let Err(e) = s.finish_fit(&job, &outcome) {
            s.status = FitStatus::Failed {
                answers: job.answers,
                message: e.to_string(),
            };
        }
        if let Ok(snapshot) = outcome {
            *handle.snapshot.write().expect("snapshot lock") = Some(Arc::new(snapshot));
        }
    });
    let s = h.session.lock().await;
    Ok((StatusCode::ACCEPTED, Json(status_json(&s))))
}

async fn status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let h = state.handle(&id)?;
    let s = h.session.lock().await;
    Ok(Json(status_json(&s)))
}

#[derive(Deserialize)]
struct SamplesQuery {
    n: Option<usize>,
}

#[derive(Serialize)]
struct SamplesBody<'a> {
    schema: &'static str,
    answers: usize,
    n: usize,
    points: Vec<&'a [f64]>,
}

async fn samples(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<SamplesQuery>) -> ApiResult {
    let snap = state.handle(&id)?.snapshot().ok_or(SessionError::NotReady)?;
    let available = snap.samples.nrows();
    let n = q.n.unwrap_or(available);
    if n > available {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "too-many-samples",
            format!("the fit holds {available} samples"),
        ));
    }
    let points: Vec<&[f64]> = snap
        .samples
        .rows()
        .into_iter()
        .take(n)
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    let body = SamplesBody {
        schema: API_SCHEMA,
        answers: snap.answers,
        n,
        points,
    };
    Ok(Json(serde_json::to_value(body).expect("serializable")))
}

#[derive(Deserialize)]
struct GridQuery {
    ax1: Option<usize>,
    ax2: Option<usize>,
}

async fn grids(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<GridQuery>) -> ApiResult {
    let snap = state.handle(&id)?.snapshot().ok_or(SessionError::NotReady)?;
    let d = snap.lambda.domain.dim();
    let ax1 = q.ax1.unwrap_or(0);
    let ax2 = q.ax2.unwrap_or(if d > 1 { 1 } else { 0 });
    let g = tokio::task::spawn_blocking(move || snap.grids(ax1, ax2))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let mut v = serde_json::to_value(g).expect("serializable");
    v["schema"] = json!(API_SCHEMA);
    Ok(Json(v))
}

async fn dataset(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let h = state.handle(&id)?;
    let s = h.session.lock().await;
    let csv = s.dataset()?.to_csv();
    Ok(([(axum::http::header::CONTENT_TYPE, "text/csv")], csv).into_response())
}
