//! HTTP and websocket front end: case upload, pipeline jobs on a bounded
//! worker pool, artifact download, slice images and rehearsal sessions.

pub mod cases;
pub mod error;
pub mod jobs;
pub mod protocol;
pub mod slices;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use serde_json::json;
use spinesim::config::PipelineConfig;
use spinesim::eval::LandmarkSet;
use spinesim::nifti_io::{load_label_map, load_volume};
use spinesim::sim::SimSession;
use tokio::sync::Semaphore;

use crate::cases::{input_dir, CaseRecord, CaseStatus, OPTIONAL_JSON, OPTIONAL_VOLUMES, REQUIRED_FIELDS};
use crate::error::{ApiError, ApiResult};
use crate::jobs::{Job, JobRecord};
use crate::protocol::SessionHandler;
use crate::slices::{Modality, SliceQuery};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_root: PathBuf,
    /// Concurrent pipeline jobs.
    pub workers: usize,
    pub pipeline: PipelineConfig,
}

impl ServiceConfig {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_root: data_root.into(),
            workers: default_workers(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Half the available hardware threads, at least one.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get() / 2).unwrap_or(1).max(1)
}

pub struct AppState {
    pub config: ServiceConfig,
    pub cases: Mutex<BTreeMap<String, CaseRecord>>,
    pub jobs: Mutex<BTreeMap<String, Job>>,
    pub workers: Arc<Semaphore>,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn new(config: ServiceConfig) -> std::io::Result<Shared> {
        std::fs::create_dir_all(config.data_root.join("cases"))?;
        let cases = CaseRecord::load_all(&config.data_root)
            .into_iter()
            .map(|c| (c.case_id.clone(), c))
            .collect();
        Ok(Arc::new(AppState {
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
            config,
            cases: Mutex::new(cases),
            jobs: Mutex::new(BTreeMap::new()),
        }))
    }

    pub fn root(&self) -> &std::path::Path {
        &self.config.data_root
    }

    pub fn case(&self, id: &str) -> ApiResult<CaseRecord> {
        self.cases
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no case {id}")))
    }

    pub fn update_case(&self, id: &str, f: impl FnOnce(&mut CaseRecord)) {
        let mut cases = self.cases.lock().unwrap();
        if let Some(c) = cases.get_mut(id) {
            f(c);
            c.refresh_artifacts(&self.config.data_root);
            if let Err(e) = c.save(&self.config.data_root) {
                warn!("cannot persist case {id}: {e}");
            }
        }
    }
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/cases", post(upload_case).get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/pipeline", post(start_pipeline))
        .route("/cases/{id}/model.glb", get(model_glb))
        .route("/cases/{id}/report.json", get(report_json))
        .route("/cases/{id}/slices", get(slice_png))
        .route("/cases/{id}/session", get(session_ws))
        .route("/jobs/{id}", get(get_job).delete(cancel_job))
        .layer(DefaultBodyLimit::max(2 << 30))
        .with_state(state)
}

pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, state).await
}

/// Serves on an already bound listener (port 0 in tests).
pub async fn serve_on(listener: tokio::net::TcpListener, state: Shared) -> std::io::Result<()> {
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.starts_with(&[0x1f, 0x8b])
}

async fn upload_case(State(state): State<Shared>, mut multipart: Multipart) -> ApiResult<impl IntoResponse> {
    let mut parts: BTreeMap<String, Bytes> = BTreeMap::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::BadRequest(format!("bad multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let known = REQUIRED_FIELDS.iter().chain(&OPTIONAL_VOLUMES).chain(&OPTIONAL_JSON).any(|f| *f == name);
        if !known {
            return Err(ApiError::BadRequest(format!("unexpected field {name:?}")));
        }
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::BadRequest(format!("reading {name}: {e}")))?;
        parts.insert(name, data);
    }
    let missing: Vec<&str> = REQUIRED_FIELDS.iter().copied().filter(|f| !parts.contains_key(*f)).collect();
    if !missing.is_empty() {
        return Err(ApiError::BadRequest(format!("missing {}", missing.join(", "))));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = input_dir(state.root(), &id);
    let root = state.root().to_path_buf();
    let record = tokio::task::spawn_blocking(move || -> ApiResult<CaseRecord> {
        let result = store_inputs(&dir, &parts);
        if result.is_err() {
            let _ = std::fs::remove_dir_all(dir.parent().expect("case dir"));
        }
        let files = result?;
        let rec = CaseRecord {
            case_id: id,
            files,
            status: CaseStatus::Pending,
            artifacts: BTreeMap::new(),
            last_job: None,
            failure: None,
        };
        rec.save(&root)?;
        Ok(rec)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    info!("case {} uploaded", record.case_id);
    let body = json!({ "case_id": record.case_id, "files": record.files });
    state.cases.lock().unwrap().insert(record.case_id.clone(), record);
    Ok((StatusCode::CREATED, Json(body)))
}

/// Writes and validates every uploaded file.
fn store_inputs(dir: &std::path::Path, parts: &BTreeMap<String, Bytes>) -> ApiResult<BTreeMap<String, String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (name, data) in parts {
        let file = if OPTIONAL_JSON.contains(&name.as_str()) {
            format!("{name}.json")
        } else if is_gzip(data) {
            format!("{name}.nii.gz")
        } else {
            format!("{name}.nii")
        };
        let path = dir.join(&file);
        std::fs::write(&path, data)?;
        let check = match name.as_str() {
            "ct" | "mri" => load_volume(&path).map(|_| ()),
            "landmarks_fixed" | "landmarks_moving" => LandmarkSet::load(&path).map(|_| ()),
            _ => load_label_map(&path).map(|_| ()),
        };
        check.map_err(|e| ApiError::BadRequest(format!("{name}: {e}")))?;
        files.insert(name.clone(), file);
    }
    let ct = load_volume(dir.join(&files["ct"]))?;
    let seg = load_label_map(dir.join(&files["ct_seg"]))?;
    ct.geometry()
        .ensure_matches(seg.geometry(), "ct_seg vs ct")
        .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    Ok(files)
}

async fn list_cases(State(state): State<Shared>) -> Json<Vec<CaseRecord>> {
    Json(state.cases.lock().unwrap().values().cloned().collect())
}

async fn get_case(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<CaseRecord>> {
    Ok(Json(state.case(&id)?))
}

async fn start_pipeline(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let mut cfg = state.config.pipeline.clone();
    if !body.is_empty() {
        let v: serde_json::Value =
            serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("bad JSON body: {e}")))?;
        if let Some(overrides) = v.get("config").and_then(|c| c.as_object()) {
            for (k, val) in overrides {
                let s = match val {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                cfg.set(k, &s)?;
            }
        }
        cfg.validate()?;
    }
    let job = jobs::start(&state, &id, cfg)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job, "case_id": id }))))
}

async fn get_job(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    let jobs = state.jobs.lock().unwrap();
    let job = jobs.get(&id).ok_or_else(|| ApiError::NotFound(format!("no job {id}")))?;
    let record = job.record.lock().unwrap().clone();
    Ok(Json(record))
}

async fn cancel_job(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    let jobs = state.jobs.lock().unwrap();
    let job = jobs.get(&id).ok_or_else(|| ApiError::NotFound(format!("no job {id}")))?;
    job.cancel.store(true, std::sync::atomic::Ordering::Relaxed);
    let record = job.record.lock().unwrap().clone();
    Ok(Json(record))
}

fn done_artifact(state: &AppState, id: &str, pick: impl Fn(&spinesim::pipeline::Artifacts) -> PathBuf) -> ApiResult<PathBuf> {
    let case = state.case(id)?;
    if case.status != CaseStatus::Done {
        return Err(ApiError::NotFound(format!("pipeline for case {id} has not completed")));
    }
    let path = pick(&case.artifacts_struct(state.root()));
    if !path.is_file() {
        return Err(ApiError::NotFound(format!("{} missing", path.display())));
    }
    Ok(path)
}

async fn model_glb(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let path = done_artifact(&state, &id, |a| a.model_glb.clone())?;
    let bytes = tokio::fs::read(path).await?;
    Ok(([(header::CONTENT_TYPE, "model/gltf-binary")], bytes).into_response())
}

async fn report_json(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let path = done_artifact(&state, &id, |a| a.report.clone())?;
    let bytes = tokio::fs::read(path).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn slice_png(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let case = state.case(&id)?;
    let root = state.root().to_path_buf();
    let png = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> {
        let input = input_dir(&root, &case.case_id);
        let out = case.artifacts_struct(&root);
        let volume = match q.modality {
            Modality::Ct => load_volume(input.join(&case.files["ct"]))?,
            // MRI is only shown in registered (CT) space.
            Modality::Mri => {
                if !out.warped_mri.is_file() {
                    return Err(ApiError::NotFound("registered MRI not available before the pipeline runs".into()));
                }
                load_volume(&out.warped_mri)?
            }
        };
        let labels = if !q.overlay {
            None
        } else if out.model_seg.is_file() {
            Some(load_label_map(&out.model_seg)?)
        } else {
            Some(load_label_map(input.join(&case.files["ct_seg"]))?)
        };
        slices::render(&volume, labels.as_ref(), q.axis, q.index)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn session_ws(State(state): State<Shared>, Path(id): Path<String>, ws: WebSocketUpgrade) -> ApiResult<Response> {
    let model = done_artifact(&state, &id, |a| a.model_seg.clone())?;
    let session_cfg = state.config.pipeline.session.clone();
    let session = tokio::task::spawn_blocking(move || -> ApiResult<SimSession> {
        let lm = load_label_map(model)?;
        Ok(SimSession::new(&lm, session_cfg)?)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    info!("session opened for case {id}");
    Ok(ws.on_upgrade(move |socket| run_session(socket, SessionHandler::new(session))))
}

async fn run_session(mut socket: WebSocket, mut handler: SessionHandler) {
    while let Some(Ok(msg)) = socket.recv().await {
        let replies = match msg {
            Message::Text(t) => handler.handle_text(t.as_str()),
            Message::Binary(_) => handler.handle_text("binary frames are not supported"),
            Message::Close(_) => break,
            _ => continue,
        };
        for r in replies {
            let text = serde_json::to_string(&r).expect("server messages serialize");
            if socket.send(Message::Text(text.into())).await.is_err() {
                return;
            }
        }
    }
}
