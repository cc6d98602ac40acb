//! HTTP JSON API over the trial conductor.
//!
//! Every trial has a single writer: mutations take the trial's write lock,
//! persist the new events, then publish the new state. Reads share the
//! lock. Errors are returned as `{code, message, field}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use seqdose::calibrate::{calibrate_thresholds, CalibrationResult, CalibrationSpec};
use seqdose::conductor::{
    amend_outcome, amend_thresholds, create_trial, enroll, record_outcome, trial_report, what_if,
    Applied, Command, ConductorError, Event, JsonlStore, StoreError, TrialConfig, TrialReport,
    TrialState, WhatIf,
};
use seqdose::seqtest::Thresholds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
            field: None,
        }
    }

    fn with_field(mut self, field: &str) -> Self {
        self.field = Some(field.into());
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

impl From<ConductorError> for ApiError {
    fn from(e: ConductorError) -> Self {
        let msg = e.to_string();
        match e {
            ConductorError::InvalidConfig(fields) => {
                let mut err = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", msg);
                err.field = fields.first().map(|f| f.field.clone());
                err
            }
            ConductorError::OutOfOrder { .. } => ApiError::new(StatusCode::CONFLICT, "out_of_order", msg).with_field("patient"),
            ConductorError::NotEnrolled(_) => ApiError::new(StatusCode::CONFLICT, "not_enrolled", msg).with_field("patient"),
            ConductorError::EnrollmentClosed => ApiError::new(StatusCode::CONFLICT, "enrollment_closed", msg),
            ConductorError::AlreadyTerminated => ApiError::new(StatusCode::CONFLICT, "already_terminated", msg),
            ConductorError::VersionConflict { .. } => {
                ApiError::new(StatusCode::CONFLICT, "version_conflict", msg).with_field("version")
            }
            ConductorError::InvalidAmendment(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_amendment", msg),
            ConductorError::Analysis(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "analysis_failed", msg),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", msg),
            StoreError::Exists(_) => ApiError::new(StatusCode::CONFLICT, "trial_exists", msg).with_field("trial_id"),
            StoreError::InvalidId(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_id", msg).with_field("trial_id"),
            StoreError::Corrupt { .. } | StoreError::Io(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", msg)
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        let text = e.body_text();
        // serde reports the offending path as "field: message" after the prefix.
        let field = text
            .split(": ")
            .nth(1)
            .filter(|s| !s.contains(' ') && !s.is_empty())
            .map(str::to_owned);
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "invalid_body".into(),
            message: text,
            field,
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Trial {
    state: TrialState,
    events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum JobStatus {
    Running,
    Done { result: Box<CalibrationResult> },
    Failed { message: String },
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    store: JsonlStore,
    token: Option<String>,
    trials: RwLock<HashMap<String, Arc<RwLock<Trial>>>>,
    jobs: Mutex<HashMap<String, JobStatus>>,
}

impl AppState {
    pub fn new(store: JsonlStore, token: Option<String>) -> Self {
        Self {
            inner: Arc::new(Inner {
                store,
                token,
                trials: RwLock::new(HashMap::new()),
                jobs: Mutex::new(HashMap::new()),
            }),
        }
    }

    fn trial(&self, id: &str) -> ApiResult<Arc<RwLock<Trial>>> {
        if let Some(t) = self.inner.trials.read().unwrap().get(id) {
            return Ok(t.clone());
        }
        let (state, events) = self.inner.store.load(id)?;
        let mut map = self.inner.trials.write().unwrap();
        Ok(map
            .entry(id.to_owned())
            .or_insert_with(|| Arc::new(RwLock::new(Trial { state, events })))
            .clone())
    }

    /// Runs `f` under the trial's write lock and persists what it emits.
    fn mutate(&self, id: &str, f: impl FnOnce(&TrialState) -> Result<Applied, ConductorError>) -> ApiResult<TrialState> {
        let t = self.trial(id)?;
        let mut t = t.write().unwrap();
        let applied = f(&t.state)?;
        self.inner.store.append(&applied.state, &applied.events)?;
        t.events.extend(applied.events);
        t.state = applied.state;
        Ok(t.state.clone())
    }
}

async fn auth(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.inner.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

fn actor(headers: &axum::http::HeaderMap) -> String {
    headers
        .get("x-actor")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("api")
        .to_owned()
}

#[derive(Debug, Deserialize)]
pub struct CreateTrial {
    #[serde(default)]
    pub trial_id: Option<String>,
    pub config: TrialConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StateResponse {
    pub trial_id: String,
    pub version: u64,
    pub report: TrialReport,
}

fn state_response(s: &TrialState) -> ApiResult<StateResponse> {
    Ok(StateResponse {
        trial_id: s.trial_id.clone(),
        version: s.version,
        report: trial_report(s, &[])?,
    })
}

async fn create(
    State(app): State<AppState>,
    headers: axum::http::HeaderMap,
    body: Result<Json<CreateTrial>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<StateResponse>)> {
    let Json(body) = body?;
    let id = body
        .trial_id
        .unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    if !seqdose::conductor::store::valid_id(&id) {
        return Err(StoreError::InvalidId(id).into());
    }
    let applied = create_trial(&id, body.config, &Command::now(actor(&headers)))?;
    app.inner.store.create(&id, &applied.events)?;
    let resp = state_response(&applied.state)?;
    app.inner.trials.write().unwrap().insert(
        id,
        Arc::new(RwLock::new(Trial {
            state: applied.state,
            events: applied.events,
        })),
    );
    Ok((StatusCode::CREATED, Json(resp)))
}

#[derive(Debug, Deserialize)]
pub struct VersionBody {
    pub version: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Enrolled {
    pub patient: usize,
    pub dose: f64,
    pub version: u64,
}

async fn enroll_patient(
    State(app): State<AppState>,
    Path(id): Path<String>,
    headers: axum::http::HeaderMap,
    body: Result<Json<VersionBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Enrolled>)> {
    let Json(body) = body?;
    let cmd = Command::now(actor(&headers));
    let s = app.mutate(&id, |s| enroll(s, body.version, &cmd))?;
    Ok((
        StatusCode::CREATED,
        Json(Enrolled {
            patient: s.enrolled() - 1,
            dose: *s.doses.last().expect("just enrolled"),
            version: s.version,
        }),
    ))
}

#[derive(Debug, Deserialize)]
pub struct OutcomeBody {
    pub patient: usize,
    pub y: bool,
    pub z: bool,
    pub version: u64,
}

async fn outcome(
    State(app): State<AppState>,
    Path(id): Path<String>,
    headers: axum::http::HeaderMap,
    body: Result<Json<OutcomeBody>, JsonRejection>,
) -> ApiResult<Json<StateResponse>> {
    let Json(b) = body?;
    let cmd = Command::now(actor(&headers));
    let s = app.mutate(&id, |s| record_outcome(s, b.patient, b.y, b.z, b.version, &cmd))?;
    Ok(Json(state_response(&s)?))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", tag = "target")]
pub enum AmendmentBody {
    Outcome {
        patient: usize,
        y: bool,
        z: bool,
        reason: String,
        version: u64,
    },
    Thresholds {
        thresholds: Thresholds,
        reason: String,
        version: u64,
    },
}

async fn amend(
    State(app): State<AppState>,
    Path(id): Path<String>,
    headers: axum::http::HeaderMap,
    body: Result<Json<AmendmentBody>, JsonRejection>,
) -> ApiResult<Json<StateResponse>> {
    let Json(b) = body?;
    let cmd = Command::now(actor(&headers));
    let s = match b {
        AmendmentBody::Outcome {
            patient,
            y,
            z,
            reason,
            version,
        } => app.mutate(&id, |s| amend_outcome(s, patient, y, z, &reason, version, &cmd))?,
        AmendmentBody::Thresholds {
            thresholds,
            reason,
            version,
        } => app.mutate(&id, |s| amend_thresholds(s, thresholds, &reason, version, &cmd))?,
    };
    Ok(Json(state_response(&s)?))
}

#[derive(Debug, Deserialize)]
pub struct ReportQuery {
    #[serde(default)]
    pub audit: bool,
}

async fn snapshot(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Json<TrialReport>> {
    let t = app.trial(&id)?;
    let t = t.read().unwrap();
    let events: &[Event] = if q.audit { &t.events } else { &[] };
    Ok(Json(trial_report(&t.state, events)?))
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    #[serde(default)]
    pub since: u64,
}

async fn events(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Json<Vec<Event>>> {
    let t = app.trial(&id)?;
    let t = t.read().unwrap();
    let from = (q.since as usize).min(t.events.len());
    Ok(Json(t.events[from..].to_vec()))
}

#[derive(Debug, Deserialize)]
pub struct OutcomePair {
    pub y: bool,
    pub z: bool,
}

#[derive(Debug, Deserialize)]
pub struct WhatIfBody {
    pub outcomes: Vec<OutcomePair>,
}

async fn what_if_handler(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<WhatIfBody>, JsonRejection>,
) -> ApiResult<Json<WhatIf>> {
    let Json(b) = body?;
    let t = app.trial(&id)?;
    let state = t.read().unwrap().state.clone();
    let outcomes: Vec<(bool, bool)> = b.outcomes.iter().map(|o| (o.y, o.z)).collect();
    Ok(Json(what_if(&state, &outcomes)?))
}

fn default_n_boot() -> usize {
    10_000
}

#[derive(Debug, Deserialize)]
pub struct CalibrateBody {
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub p0: Option<f64>,
    #[serde(default)]
    pub p1: Option<f64>,
    #[serde(default)]
    pub early_efficacy: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobRef {
    pub job_id: String,
    #[serde(flatten)]
    pub status: JobStatus,
}

fn calibration_spec(s: &TrialState, b: &CalibrateBody) -> ApiResult<CalibrationSpec> {
    let cfg = &s.config;
    if s.phase1.is_none() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "phase1_open",
            "calibration needs the completed Phase I data",
        ));
    }
    let th = cfg.thresholds.as_ref();
    let p0 = b
        .p0
        .or(th.map(|t| t.p0))
        .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", "p0 is required").with_field("p0"))?;
    let spec = CalibrationSpec {
        alpha: b.alpha.or(th.map(|t| t.alpha)).unwrap_or(0.05),
        beta: b.beta.or(th.map(|t| t.beta)).unwrap_or(0.2),
        epsilon: b.epsilon.or(th.map(|t| t.epsilon)).unwrap_or(1.0 / 3.0),
        n_boot: b.n_boot,
        seed: b.seed,
        schedule: cfg.schedule(),
        phase1_data: s.data.head(cfg.phase1.m),
        analysis: cfg.analysis.clone(),
        domain: cfg.domain.clone(),
        q: cfg.phase1.q,
        p0,
        p1: b.p1,
        policy: cfg.policy,
        estimator: cfg.estimator,
        early_efficacy: b.early_efficacy.unwrap_or(true),
        omega: cfg.phase1.omega,
    };
    spec.validate()
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_calibration", e.to_string()))?;
    Ok(spec)
}

async fn calibrate(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<CalibrateBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<JobRef>)> {
    let Json(b) = body?;
    let t = app.trial(&id)?;
    let spec = calibration_spec(&t.read().unwrap().state, &b)?;
    let job_id = format!("{id}-{}", uuid::Uuid::new_v4().simple());
    app.inner.jobs.lock().unwrap().insert(job_id.clone(), JobStatus::Running);
    let jobs = app.clone();
    let key = job_id.clone();
    tokio::task::spawn_blocking(move || {
        let status = match calibrate_thresholds(&spec) {
            Ok(r) => JobStatus::Done { result: Box::new(r) },
            Err(e) => JobStatus::Failed { message: e.to_string() },
        };
        jobs.inner.jobs.lock().unwrap().insert(key, status);
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(JobRef {
            job_id,
            status: JobStatus::Running,
        }),
    ))
}

async fn calibration_job(
    State(app): State<AppState>,
    Path((id, job)): Path<(String, String)>,
) -> ApiResult<Json<JobRef>> {
    let status = app
        .inner
        .jobs
        .lock()
        .unwrap()
        .get(&job)
        .filter(|_| job.starts_with(&format!("{id}-")))
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no calibration job {job:?}")))?;
    Ok(Json(JobRef { job_id: job, status }))
}

async fn list(State(app): State<AppState>) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(app.inner.store.list()?))
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(app: AppState) -> Router {
    let api = Router::new()
        .route("/trials", post(create).get(list))
        .route("/trials/{id}", get(snapshot))
        .route("/trials/{id}/enrollments", post(enroll_patient))
        .route("/trials/{id}/outcomes", post(outcome))
        .route("/trials/{id}/amendments", post(amend))
        .route("/trials/{id}/events", get(events))
        .route("/trials/{id}/what-if", post(what_if_handler))
        .route("/trials/{id}/calibrate", post(calibrate))
        .route("/trials/{id}/calibrate/{job}", get(calibration_job))
        .route_layer(middleware::from_fn_with_state(app.clone(), auth));
    Router::new()
        .route("/health", get(health))
        .merge(api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(app)
}

pub async fn serve(addr: SocketAddr, store: JsonlStore, token: Option<String>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::new(store, token))).await
}
