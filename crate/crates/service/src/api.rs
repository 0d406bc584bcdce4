//! HTTP routes and handlers.

use crate::session::{Session, SessionError, SessionView};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use seqgraph::serde_ext;
use seqgraph::{DesignFile, Error, MonitorOptions, StageObservation};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};
use tokio::sync::Mutex;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

struct Slot {
    work: Arc<Mutex<Session>>,
    view: RwLock<Arc<SessionView>>,
}

impl Slot {
    fn new(s: Session) -> Self {
        let view = RwLock::new(s.view());
        Slot {
            work: Arc::new(Mutex::new(s)),
            view,
        }
    }

    fn view(&self) -> Arc<SessionView> {
        self.view.read().expect("view lock").clone()
    }
}

/// Shared server state.
pub struct AppState {
    data_dir: PathBuf,
    timeout: Duration,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    /// Idempotency key to session id. Creation holds this lock throughout.
    keys: std::sync::Mutex<HashMap<String, String>>,
}

impl AppState {
    /// Opens the data directory and replays every session log in it.
    pub fn open(data_dir: PathBuf, timeout: Duration) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&data_dir)?;
        let mut sessions = HashMap::new();
        let mut keys = HashMap::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "log"))
            .collect();
        paths.sort();
        for p in paths {
            match Session::replay(&p) {
                Ok((s, key)) => {
                    if let Some(k) = key {
                        keys.insert(k, s.id.clone());
                    }
                    sessions.insert(s.id.clone(), Arc::new(Slot::new(s)));
                }
                Err(e) => log::error!("{}: cannot restore session: {e:?}", p.display()),
            }
        }
        log::info!("restored {} sessions from {}", sessions.len(), data_dir.display());
        Ok(Arc::new(AppState {
            data_dir,
            timeout,
            sessions: RwLock::new(sessions),
            keys: std::sync::Mutex::new(keys),
        }))
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .read()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/stages", post(submit_stage))
        .route("/sessions/{id}/decisions", post(decide))
        .route("/sessions/{id}/bounds", get(bounds))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Engine(e) => {
                let status = match e {
                    Error::StageOverrun { .. } | Error::NotCollecting { .. } => StatusCode::CONFLICT,
                    _ if e.is_validation() => StatusCode::UNPROCESSABLE_ENTITY,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                ApiError::new(status, e.to_string())
            }
            SessionError::Io(e) => {
                log::error!("session storage: {e}");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("storage error: {e}"))
            }
        }
    }
}

/// Parses a JSON body; anything unreadable or empty is a 422.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::unprocessable("request body is empty"));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("invalid request body: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    design: DesignFile,
    #[serde(default)]
    options: MonitorOptions,
}

async fn create_session(State(app): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let key = match headers.get(IDEMPOTENCY_HEADER) {
        Some(v) => Some(
            v.to_str()
                .map_err(|_| ApiError::unprocessable("idempotency key must be visible ASCII"))?
                .to_string(),
        ),
        None => None,
    };
    let req: CreateRequest = parse_body(&body)?;
    let app2 = app.clone();
    tokio::task::spawn_blocking(move || {
        let mut keys = app2.keys.lock().expect("key table");
        if let Some(id) = key.as_ref().and_then(|k| keys.get(k)) {
            return Ok((StatusCode::OK, Json(json!({ "session_id": id }))).into_response());
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let s = Session::create(&app2.data_dir, id.clone(), req.design, req.options, key.clone())?;
        app2.sessions
            .write()
            .expect("session table")
            .insert(id.clone(), Arc::new(Slot::new(s)));
        if let Some(k) = key {
            keys.insert(k, id.clone());
        }
        Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let view: Arc<SessionView> = app.slot(&id)?.view();
    Ok(Json(&*view).into_response())
}

/// A hypothesis given by name or 1-based number.
#[derive(Deserialize)]
#[serde(untagged)]
enum HypKey {
    Number(usize),
    Name(String),
}

impl HypKey {
    fn resolve(&self, names: &[String]) -> Result<usize, ApiError> {
        let found = match self {
            HypKey::Number(n) => (*n >= 1 && *n <= names.len()).then(|| n - 1),
            HypKey::Name(s) => names.iter().position(|x| x == s),
        };
        found.ok_or_else(|| {
            ApiError::unprocessable(match self {
                HypKey::Number(n) => format!("unknown hypothesis {n}"),
                HypKey::Name(s) => format!("unknown hypothesis `{s}`"),
            })
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationIn {
    hypothesis: HypKey,
    /// 1-based; when given it must be the next stage.
    #[serde(default)]
    stage: Option<usize>,
    estimate: f64,
    std_error: f64,
    info_fraction: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StageRequest {
    observations: Vec<ObservationIn>,
}

fn lock_session(slot: &Slot) -> Result<tokio::sync::OwnedMutexGuard<Session>, ApiError> {
    slot.work
        .clone()
        .try_lock_owned()
        .map_err(|_| ApiError::conflict("another request is modifying this session"))
}

async fn submit_stage(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let slot = app.slot(&id)?;
    let req: StageRequest = parse_body(&body)?;
    if req.observations.is_empty() {
        return Err(ApiError::unprocessable("no observations submitted"));
    }
    let mut guard = lock_session(&slot)?;
    let view = slot.view();
    let st = &view.state;
    if st.pending_decision {
        return Err(ApiError::conflict(format!("stop decisions for stage {} are pending", st.stage + 1)));
    }
    if st.is_finished() {
        return Err(ApiError::conflict("the trial has ended"));
    }
    let k = st.stage;
    let mut obs = Vec::with_capacity(req.observations.len());
    for o in &req.observations {
        let j = o.hypothesis.resolve(&view.hypotheses)?;
        if let Some(s) = o.stage {
            if s != k + 1 {
                return Err(ApiError::conflict(format!("expected data for stage {}, got stage {s}", k + 1)));
            }
        }
        if !st.collecting[j] {
            return Err(ApiError::conflict(format!("hypothesis {} has stopped collecting data", view.hypotheses[j])));
        }
        obs.push(StageObservation {
            hypothesis: j,
            stage: k,
            estimate: o.estimate,
            std_error: o.std_error,
            info_fraction: o.info_fraction,
            stopped: false,
        });
    }
    let deadline = Instant::now() + app.timeout;
    let slot2 = slot.clone();
    tokio::task::spawn_blocking(move || {
        let report = guard.submit_stage(obs, Some(deadline))?;
        *slot2.view.write().expect("view lock") = guard.view();
        Ok(Json(report).into_response())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionRequest {
    #[serde(default)]
    stop: Vec<HypKey>,
}

#[derive(Serialize)]
struct DecisionResponse {
    stopped: Vec<usize>,
    collecting: Vec<bool>,
    next_stage: Option<usize>,
    finished: bool,
}

async fn decide(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Json<DecisionResponse>, ApiError> {
    let slot = app.slot(&id)?;
    let req: DecisionRequest = if body.iter().all(u8::is_ascii_whitespace) {
        DecisionRequest { stop: Vec::new() }
    } else {
        parse_body(&body)?
    };
    let mut guard = lock_session(&slot)?;
    let view = slot.view();
    if !view.state.pending_decision {
        return Err(ApiError::conflict("no analysed stage awaits decisions"));
    }
    let stop = req
        .stop
        .iter()
        .map(|h| h.resolve(&view.hypotheses))
        .collect::<Result<Vec<_>, _>>()?;
    let stopped = guard.decide(stop)?;
    let v = guard.view();
    *slot.view.write().expect("view lock") = v.clone();
    Ok(Json(DecisionResponse {
        stopped: stopped.iter().map(|j| j + 1).collect(),
        collecting: v.state.collecting.clone(),
        next_stage: (!v.state.is_finished()).then_some(v.state.stage + 1),
        finished: v.state.is_finished(),
    }))
}

#[derive(Deserialize)]
struct BoundsQuery {
    stage: Option<usize>,
    kind: Option<String>,
    lambda: Option<String>,
}

#[derive(Serialize)]
struct BoundsResponse {
    stage: usize,
    kind: &'static str,
    lambda: &'static str,
    #[serde(with = "serde_ext::vec")]
    lower: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    upper: Option<Vec<serde_ext::ExtReal>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap: Option<serde_ext::ExtReal>,
    rejected: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timed_out: Option<bool>,
}

async fn bounds(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<BoundsQuery>,
) -> Result<Json<BoundsResponse>, ApiError> {
    let view = app.slot(&id)?.view();
    let stage = match q.stage {
        Some(k) => k,
        None => view.reports.len(),
    };
    if stage == 0 || stage > view.reports.len() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("stage {stage} has not been analysed")));
    }
    let r = &view.reports[stage - 1];
    let kind = match q.kind.as_deref().unwrap_or("compatible") {
        "compatible" => "compatible",
        "informative" => "informative",
        other => return Err(ApiError::unprocessable(format!("kind must be compatible or informative, not `{other}`"))),
    };
    let lambda = match q.lambda.as_deref().unwrap_or("s") {
        "r" => "r",
        "s" => "s",
        "c" => "c",
        other => return Err(ApiError::unprocessable(format!("lambda must be r, s or c, not `{other}`"))),
    };
    let plain = |lower: &Vec<f64>, rejected: &Vec<usize>| BoundsResponse {
        stage,
        kind,
        lambda,
        lower: lower.clone(),
        upper: None,
        gap: None,
        rejected: rejected.clone(),
        converged: None,
        timed_out: None,
    };
    let out = match (kind, lambda) {
        ("compatible", "r") => plain(&r.compatible_r, &r.rejected_r),
        ("compatible", "s") => plain(&r.compatible_s, &r.rejected_s),
        ("compatible", _) => plain(&r.compatible_c, &r.rejected_c),
        ("informative", "c") => plain(&r.informative_c, &r.informative_rejected_c),
        _ => {
            let b = if lambda == "r" { &r.informative_r } else { &r.informative_s };
            BoundsResponse {
                stage,
                kind,
                lambda,
                lower: b.lower.clone(),
                upper: Some(b.upper.iter().map(|&x| serde_ext::ExtReal(x)).collect()),
                gap: Some(serde_ext::ExtReal(b.gap)),
                rejected: b.rejected().iter().map(|j| j + 1).collect(),
                converged: Some(b.converged),
                timed_out: Some(b.timed_out),
            }
        }
    };
    Ok(Json(out))
}
