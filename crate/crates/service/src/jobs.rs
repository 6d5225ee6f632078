//! Pipeline jobs: one per run, executed on the shared worker pool.

use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};

use log::{error, info};
use serde::{Deserialize, Serialize};
use spinesim::config::PipelineConfig;
use spinesim::eval::{Metrics, TimingReport};
use spinesim::pipeline::{run_pipeline_with, Observer, Stage};

use crate::cases::{output_dir, CaseStatus, Failure};
use crate::error::{ApiError, ApiResult};
use crate::Shared;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub case_id: String,
    pub status: JobStatus,
    /// Stage currently running (or where the job stopped).
    pub stage: Option<String>,
    pub timings: TimingReport,
    pub metrics: Option<Metrics>,
    pub failure: Option<Failure>,
}

pub struct Job {
    pub record: Arc<Mutex<JobRecord>>,
    pub cancel: Arc<AtomicBool>,
}

struct Progress(Arc<Mutex<JobRecord>>);

impl Observer for Progress {
    fn stage_started(&mut self, stage: Stage) {
        self.0.lock().unwrap().stage = Some(stage.as_str().into());
    }
}

/// Queues a run for the case; 409 while one is queued or running.
pub fn start(state: &Shared, case_id: &str, cfg: PipelineConfig) -> ApiResult<String> {
    let job_id = uuid::Uuid::new_v4().simple().to_string();
    {
        let mut cases = state.cases.lock().unwrap();
        let case = cases
            .get_mut(case_id)
            .ok_or_else(|| ApiError::NotFound(format!("no case {case_id}")))?;
        match case.status {
            CaseStatus::Running => {
                return Err(ApiError::Conflict(format!("pipeline already running for case {case_id}")))
            }
            CaseStatus::Done => return Err(ApiError::Conflict(format!("pipeline already completed for case {case_id}"))),
            CaseStatus::Pending | CaseStatus::Failed => {}
        }
        case.case_files(state.root())?;
        case.status = CaseStatus::Running;
        case.failure = None;
        case.last_job = Some(job_id.clone());
        let _ = case.save(state.root());
    }
    let record = Arc::new(Mutex::new(JobRecord {
        job_id: job_id.clone(),
        case_id: case_id.to_string(),
        status: JobStatus::Queued,
        stage: None,
        timings: TimingReport::default(),
        metrics: None,
        failure: None,
    }));
    let cancel = Arc::new(AtomicBool::new(false));
    state.jobs.lock().unwrap().insert(
        job_id.clone(),
        Job {
            record: record.clone(),
            cancel: cancel.clone(),
        },
    );
    let state = state.clone();
    let case_id = case_id.to_string();
    tokio::spawn(async move {
        let Ok(_permit) = state.workers.clone().acquire_owned().await else { return };
        record.lock().unwrap().status = JobStatus::Running;
        let root = state.root().to_path_buf();
        let files = state.case(&case_id).and_then(|c| c.case_files(&root));
        let rec = record.clone();
        let out = output_dir(&root, &case_id);
        let result = match files {
            Ok(files) => tokio::task::spawn_blocking(move || {
                run_pipeline_with(&files, &out, &cfg, &cancel, &mut Progress(rec)).map(|run| run.report)
            })
            .await
            .unwrap_or_else(|e| Err(spinesim::Error::InvalidArgument(format!("worker panicked: {e}")))),
            Err(e) => Err(spinesim::Error::InvalidArgument(e.to_string())),
        };
        let mut r = record.lock().unwrap();
        match result {
            Ok(report) => {
                info!("job {} done", r.job_id);
                r.status = JobStatus::Done;
                r.timings = report.timings;
                r.metrics = Some(report.metrics);
                drop(r);
                state.update_case(&case_id, |c| c.status = CaseStatus::Done);
            }
            Err(e) => {
                let cancelled = matches!(e, spinesim::Error::Cancelled);
                let stage = e
                    .stage()
                    .map(str::to_string)
                    .or_else(|| r.stage.clone())
                    .unwrap_or_else(|| "segmentation-ingest".into());
                let failure = Failure {
                    stage,
                    message: e.to_string(),
                };
                error!("job {} failed: {}", r.job_id, failure.message);
                r.status = if cancelled { JobStatus::Cancelled } else { JobStatus::Failed };
                r.failure = Some(failure.clone());
                drop(r);
                state.update_case(&case_id, |c| {
                    c.status = CaseStatus::Failed;
                    c.failure = Some(failure);
                });
            }
        }
    });
    Ok(job_id)
}
