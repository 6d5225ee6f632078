//! Case records persisted under `DATA_ROOT/cases/<id>/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spinesim::pipeline::{Artifacts, CaseFiles};

use crate::error::{ApiError, ApiResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    /// Uploaded inputs by field name.
    pub files: BTreeMap<String, String>,
    pub status: CaseStatus,
    /// Pipeline outputs that exist on disk.
    pub artifacts: BTreeMap<String, String>,
    pub last_job: Option<String>,
    pub failure: Option<Failure>,
}

pub const REQUIRED_FIELDS: [&str; 4] = ["ct", "mri", "ct_seg", "mri_seg"];
pub const OPTIONAL_VOLUMES: [&str; 2] = ["ct_seg_secondary", "truth_seg"];
pub const OPTIONAL_JSON: [&str; 2] = ["landmarks_fixed", "landmarks_moving"];

pub fn case_dir(root: &Path, id: &str) -> PathBuf {
    root.join("cases").join(id)
}

pub fn input_dir(root: &Path, id: &str) -> PathBuf {
    case_dir(root, id).join("input")
}

pub fn output_dir(root: &Path, id: &str) -> PathBuf {
    case_dir(root, id).join("output")
}

impl CaseRecord {
    pub fn case_files(&self, root: &Path) -> ApiResult<CaseFiles> {
        CaseFiles::from_dir(input_dir(root, &self.case_id)).map_err(ApiError::from)
    }

    pub fn artifacts_struct(&self, root: &Path) -> Artifacts {
        Artifacts::in_dir(&output_dir(root, &self.case_id))
    }

    /// Re-lists artifacts from disk.
    pub fn refresh_artifacts(&mut self, root: &Path) {
        self.artifacts = self
            .artifacts_struct(root)
            .existing()
            .into_iter()
            .map(|(k, p)| (k.to_string(), p.file_name().unwrap().to_string_lossy().into_owned()))
            .collect();
    }

    pub fn save(&self, root: &Path) -> std::io::Result<()> {
        let p = case_dir(root, &self.case_id).join("case.json");
        std::fs::write(p, serde_json::to_vec_pretty(self).expect("record serializes"))
    }

    pub fn load_all(root: &Path) -> Vec<CaseRecord> {
        let Ok(entries) = std::fs::read_dir(root.join("cases")) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for e in entries.flatten() {
            let Ok(text) = std::fs::read(e.path().join("case.json")) else { continue };
            if let Ok(mut rec) = serde_json::from_slice::<CaseRecord>(&text) {
                // a job that was running when the service stopped is lost
                if rec.status == CaseStatus::Running {
                    rec.status = CaseStatus::Failed;
                    rec.failure = Some(Failure {
                        stage: "service".into(),
                        message: "service restarted during the run".into(),
                    });
                }
                out.push(rec);
            }
        }
        out
    }
}
