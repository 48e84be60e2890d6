use std::collections::HashMap;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use calib_core::env::{ContextElement, EnvKind, FeatureId};
use calib_core::oracle::Label;
use calib_core::rng::{derive_seed, rng_from, tag};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::session::{Event, ModelSlot, ModelStatus, Session, SessionLog};
use crate::teacher::{display_levels, snap, Checkpoint, QueryView, Teacher, CHECKPOINTS};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl From<calib_core::Error> for ApiError {
    fn from(e: calib_core::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared service state: one teacher, all sessions and all model slots.
pub struct AppState {
    pub teacher: Arc<Teacher>,
    pub dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    models: RwLock<HashMap<String, Arc<ModelSlot>>>,
}

impl AppState {
    /// Opens the session directory and restores every session logged there
    /// for this teacher's environment and feature. Restored checkpoints are
    /// retrained in the background. Must be called inside a tokio runtime.
    pub fn open(teacher: Teacher, dir: &FsPath) -> calib_core::Result<Arc<Self>> {
        std::fs::create_dir_all(dir).map_err(|e| calib_core::Error::io(dir, e))?;
        let state = Arc::new(AppState {
            teacher: Arc::new(teacher),
            dir: dir.to_path_buf(),
            sessions: RwLock::new(HashMap::new()),
            models: RwLock::new(HashMap::new()),
        });
        let mut logs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| calib_core::Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        logs.sort();
        for path in logs {
            state.restore(&path)?;
        }
        Ok(state)
    }

    fn restore(self: &Arc<Self>, path: &FsPath) -> calib_core::Result<()> {
        let events = SessionLog::read(path)?;
        let Some(Event::Created { session, env, feature, query_seed, model_seed, order }) = events.first().cloned() else {
            return Err(calib_core::Error::Config(format!("{} does not start with a created event", path.display())));
        };
        let cfg = &self.teacher.config;
        if (env, feature, query_seed, model_seed) != (cfg.env, cfg.feature, cfg.query_seed, cfg.model_seed) {
            return Ok(());
        }
        let mut s = Session {
            id: session.clone(),
            labels: Vec::new(),
            order,
            models: Vec::new(),
            log: SessionLog::open(path)?,
        };
        self.add_slot(&mut s, 0);
        for e in &events[1..] {
            match e {
                Event::Created { .. } => return Err(calib_core::Error::Config(format!("{}: repeated created event", path.display()))),
                Event::Label { index, label } => {
                    if *index != s.labels.len() {
                        return Err(calib_core::Error::Config(format!("{}: label {index} out of order", path.display())));
                    }
                    s.labels.push(*label);
                }
                Event::Train { checkpoint } => {
                    if s.slot(*checkpoint).is_none() {
                        self.add_slot(&mut s, *checkpoint);
                    }
                }
            }
        }
        self.sessions.write().unwrap().insert(session, Arc::new(Mutex::new(s)));
        Ok(())
    }

    fn model_id(&self, session: &str, checkpoint: usize) -> String {
        let h = derive_seed(self.teacher.config.model_seed, &[tag("model-id"), tag(session), checkpoint as u64]);
        format!("{session}-{:08x}", h as u32)
    }

    /// Registers the checkpoint model and starts training it on the
    /// session's current labels.
    fn add_slot(self: &Arc<Self>, s: &mut Session, checkpoint: usize) -> Arc<ModelSlot> {
        let slot = Arc::new(ModelSlot::new(self.model_id(&s.id, checkpoint), s.id.clone(), checkpoint));
        s.models.push(slot.clone());
        self.models.write().unwrap().insert(slot.id.clone(), slot.clone());
        self.spawn_training(slot.clone(), s.labels[..checkpoint.min(s.labels.len())].to_vec());
        slot
    }

    fn spawn_training(&self, slot: Arc<ModelSlot>, labels: Vec<Label>) {
        let teacher = self.teacher.clone();
        tokio::task::spawn_blocking(move || {
            slot.set_status(ModelStatus::Running);
            match teacher.train(slot.checkpoint, &labels) {
                Ok(cp) => {
                    let _ = slot.result.set(Arc::new(cp));
                    slot.set_status(ModelStatus::Done);
                }
                Err(e) => slot.set_status(ModelStatus::Failed { message: e.to_string() }),
            }
        });
    }

    pub fn create_session(self: &Arc<Self>) -> calib_core::Result<String> {
        let mut sessions = self.sessions.write().unwrap();
        let mut n = sessions.len() + 1;
        let id = loop {
            let id = format!("s{n:04}");
            if !sessions.contains_key(&id) && !self.dir.join(format!("{id}.jsonl")).exists() {
                break id;
            }
            n += 1;
        };
        let cfg = &self.teacher.config;
        let mut order = CHECKPOINTS.to_vec();
        order.shuffle(&mut rng_from(cfg.model_seed, &[tag("anonymize"), tag(&id)]));
        let mut log = SessionLog::create(&self.dir.join(format!("{id}.jsonl")))?;
        log.append(&Event::Created {
            session: id.clone(),
            env: cfg.env,
            feature: cfg.feature,
            query_seed: cfg.query_seed,
            model_seed: cfg.model_seed,
            order: order.clone(),
        })?;
        let mut s = Session {
            id: id.clone(),
            labels: Vec::new(),
            order,
            models: Vec::new(),
            log,
        };
        self.add_slot(&mut s, 0);
        sessions.insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok(id)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }

    fn model(&self, id: &str) -> ApiResult<Arc<ModelSlot>> {
        self.models
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown model `{id}`")))
    }

    /// The trained checkpoint of a session, if finished.
    pub fn checkpoint(&self, session: &str, checkpoint: usize) -> Option<Arc<Checkpoint>> {
        let s = self.session(session).ok()?;
        let s = s.lock().unwrap();
        s.slot(checkpoint)?.result.get().cloned()
    }

    pub fn log_path(&self, session: &str) -> PathBuf {
        self.dir.join(format!("{session}.jsonl"))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/session", post(create_session))
        .route("/session/{id}", get(session_summary))
        .route("/session/{id}/query/next", get(next_query))
        .route("/session/{id}/label", post(post_label))
        .route("/session/{id}/train", post(post_train))
        .route("/session/{id}/models", get(list_models))
        .route("/model/{id}", get(model_status))
        .route("/model/{id}/pointcloud", get(model_cloud))
        .with_state(state)
}

#[derive(Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub env: EnvKind,
    pub feature: FeatureId,
    pub query_count: usize,
    pub labeled: usize,
    pub checkpoints: Vec<usize>,
    pub prompt: String,
}

fn info(state: &AppState, s: &Session) -> SessionInfo {
    let t = &state.teacher;
    SessionInfo {
        id: s.id.clone(),
        env: t.config.env,
        feature: t.config.feature,
        query_count: t.query_count(),
        labeled: s.labels.len(),
        checkpoints: CHECKPOINTS.to_vec(),
        prompt: t.prompt(),
    }
}

async fn create_session(State(state): State<Arc<AppState>>) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let id = state.create_session()?;
    let s = state.session(&id)?;
    let s = s.lock().unwrap();
    Ok((StatusCode::CREATED, Json(info(&state, &s))))
}

async fn session_summary(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let s = state.session(&id)?;
    let s = s.lock().unwrap();
    Ok(Json(info(&state, &s)))
}

async fn next_query(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<QueryView>> {
    let s = state.session(&id)?;
    let next = s.lock().unwrap().labels.len();
    state
        .teacher
        .query_view(next)
        .map(Json)
        .ok_or_else(|| ApiError::conflict("all queries are labeled"))
}

#[derive(Serialize, Deserialize)]
pub struct LabelRequest {
    pub index: usize,
    pub label: Label,
}

#[derive(Serialize, Deserialize)]
pub struct LabelResponse {
    pub accepted: bool,
    pub labeled: usize,
    /// Set when this label completed a checkpoint whose training is now scheduled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next_checkpoint: Option<usize>,
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

async fn post_label(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<LabelResponse>> {
    let req: LabelRequest = parse(&body)?;
    let s = state.session(&id)?;
    let mut s = s.lock().unwrap();
    let next = s.labels.len();
    if req.index < next {
        return Err(ApiError::bad_request(format!("query {} is already labeled", req.index)));
    }
    if req.index != next || next >= state.teacher.query_count() {
        return Err(ApiError::bad_request(format!("query {} is not the served query", req.index)));
    }
    s.log.append(&Event::Label { index: req.index, label: req.label })?;
    s.labels.push(req.label);
    let labeled = s.labels.len();
    let next_checkpoint = if CHECKPOINTS.contains(&labeled) && s.slot(labeled).is_none() {
        s.log.append(&Event::Train { checkpoint: labeled })?;
        state.add_slot(&mut s, labeled);
        Some(labeled)
    } else {
        None
    };
    Ok(Json(LabelResponse {
        accepted: true,
        labeled,
        next_checkpoint,
    }))
}

#[derive(Serialize, Deserialize)]
pub struct TrainRequest {
    pub checkpoint: usize,
}

#[derive(Serialize, Deserialize)]
pub struct TrainResponse {
    pub model_id: String,
    pub status: ModelStatus,
}

async fn post_train(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<TrainResponse>> {
    let req: TrainRequest = parse(&body)?;
    let s = state.session(&id)?;
    let mut s = s.lock().unwrap();
    if !CHECKPOINTS.contains(&req.checkpoint) {
        return Err(ApiError::bad_request(format!("{} is not a checkpoint", req.checkpoint)));
    }
    if s.labels.len() < req.checkpoint {
        return Err(ApiError::bad_request(format!(
            "checkpoint {} not reached: {} labels",
            req.checkpoint,
            s.labels.len()
        )));
    }
    if let Some(slot) = s.slot(req.checkpoint).cloned() {
        return match slot.status() {
            ModelStatus::Done => Err(ApiError::conflict(format!("checkpoint {} is already trained", req.checkpoint))),
            ModelStatus::Failed { .. } => {
                slot.set_status(ModelStatus::Pending);
                let n = req.checkpoint;
                state.spawn_training(slot.clone(), s.labels[..n].to_vec());
                Ok(Json(TrainResponse { model_id: slot.id.clone(), status: ModelStatus::Pending }))
            }
            status => Ok(Json(TrainResponse { model_id: slot.id.clone(), status })),
        };
    }
    s.log.append(&Event::Train { checkpoint: req.checkpoint })?;
    let slot = state.add_slot(&mut s, req.checkpoint);
    Ok(Json(TrainResponse {
        model_id: slot.id.clone(),
        status: slot.status(),
    }))
}

/// A model as listed to the participant: no checkpoint, just a name.
#[derive(Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: String,
    pub name: String,
    pub status: ModelStatus,
}

fn entry(s: &Session, slot: &ModelSlot) -> ModelEntry {
    let k = s.order.iter().position(|&c| c == slot.checkpoint).unwrap_or(0);
    ModelEntry {
        model_id: slot.id.clone(),
        name: format!("Relationship {}", k + 1),
        status: slot.status(),
    }
}

async fn list_models(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<ModelEntry>>> {
    let s = state.session(&id)?;
    let s = s.lock().unwrap();
    let mut out: Vec<ModelEntry> = s.models.iter().map(|m| entry(&s, m)).collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Json(out))
}

async fn model_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ModelEntry>> {
    let slot = state.model(&id)?;
    let s = state.session(&slot.session)?;
    let s = s.lock().unwrap();
    Ok(Json(entry(&s, &slot)))
}

#[derive(Deserialize)]
pub struct CloudParams {
    pub context_step: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct CloudView {
    pub model_id: String,
    pub feature: FeatureId,
    pub context_element: ContextElement,
    /// The four context values the slider can show.
    pub display_contexts: Vec<f64>,
    pub display_index: usize,
    pub context_value: f64,
    pub positions: Vec<[f64; 3]>,
    /// Values in `[0, 1]`, normalized over every context of this model.
    pub values: Vec<f64>,
}

async fn model_cloud(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(p): Query<CloudParams>) -> ApiResult<Json<CloudView>> {
    let c = p.context_step.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&c) {
        return Err(ApiError::bad_request("context_step must lie in [0, 1]"));
    }
    let slot = state.model(&id)?;
    let Some(cp) = slot.result.get() else {
        return Err(ApiError::conflict(format!("model is not trained yet: {:?}", slot.status())));
    };
    let cloud = &cp.cloud;
    let levels = display_levels(cloud);
    let k = snap(cloud, c);
    Ok(Json(CloudView {
        model_id: slot.id.clone(),
        feature: cloud.feature,
        context_element: cloud.context,
        display_contexts: levels.iter().map(|&l| cloud.context_values[l]).collect(),
        display_index: k,
        context_value: cloud.context_values[levels[k]],
        positions: cloud.positions.clone(),
        values: cloud.values[levels[k]].clone(),
    }))
}
