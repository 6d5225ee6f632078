//! Overlap and landmark metrics, stage timing and report output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deform::{total_transform_point, DisplacementField};
use crate::error::{Error, Result};
use crate::similarity::SimilarityTransform;
use crate::structure::StructureId;
use crate::volume::{Geometry, LabelMap, Point3};

pub const REPORT_SCHEMA_VERSION: &str = "1.0";

/// Dice coefficient of one label; two empty masks score 1.0.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u16) -> Result<f64> {
    a.geometry().ensure_matches(b.geometry(), "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkKind {
    Spinous,
    LeftTransverse,
    RightTransverse,
}

impl LandmarkKind {
    pub const ALL: [LandmarkKind; 3] = [LandmarkKind::Spinous, LandmarkKind::LeftTransverse, LandmarkKind::RightTransverse];

    pub fn as_str(self) -> &'static str {
        match self {
            LandmarkKind::Spinous => "spinous",
            LandmarkKind::LeftTransverse => "left_transverse",
            LandmarkKind::RightTransverse => "right_transverse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Fixed,
    Moving,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedLandmark {
    pub level: StructureId,
    pub kind: LandmarkKind,
    pub position_mm: Point3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub space: Space,
    pub landmarks: Vec<NamedLandmark>,
}

impl LandmarkSet {
    pub fn new(space: Space, landmarks: Vec<NamedLandmark>) -> Result<Self> {
        let set = LandmarkSet { space, landmarks };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for l in &self.landmarks {
            if !seen.insert((l.level, l.kind)) {
                return Err(Error::InvalidArgument(format!("duplicate landmark {} {}", l.level, l.kind.as_str())));
            }
            if l.position_mm.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("landmark {} {}", l.level, l.kind.as_str())));
            }
        }
        Ok(())
    }

    pub fn get(&self, level: StructureId, kind: LandmarkKind) -> Option<Point3> {
        self.landmarks.iter().find(|l| l.level == level && l.kind == kind).map(|l| l.position_mm)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: LandmarkSet = serde_json::from_str(&text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkError {
    pub level: StructureId,
    pub kind: LandmarkKind,
    pub error_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertebraTre {
    pub level: StructureId,
    pub mean_mm: f64,
    pub landmarks: Vec<LandmarkError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTre {
    pub patient: String,
    pub mean_mm: f64,
    pub vertebrae: Vec<VertebraTre>,
    pub unmatched: Vec<String>,
}

impl PatientTre {
    pub fn errors(&self) -> impl Iterator<Item = &LandmarkError> {
        self.vertebrae.iter().flat_map(|v| v.landmarks.iter())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TreReport {
    pub patients: Vec<PatientTre>,
    pub cohort_mean_mm: f64,
    /// Sample standard deviation of patient means (0 for a single patient).
    pub cohort_sd_mm: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl TreReport {
    /// Builds the per-vertebra, per-patient and cohort levels from the
    /// per-landmark errors.
    pub fn from_patients(mut patients: Vec<PatientTre>) -> Self {
        for p in &mut patients {
            for v in &mut p.vertebrae {
                v.mean_mm = mean(&v.landmarks.iter().map(|l| l.error_mm).collect::<Vec<_>>());
            }
            p.mean_mm = mean(&p.vertebrae.iter().map(|v| v.mean_mm).collect::<Vec<_>>());
        }
        let means: Vec<f64> = patients.iter().map(|p| p.mean_mm).collect();
        if means.is_empty() {
            return TreReport::default();
        }
        let m = mean(&means);
        let sd = if means.len() > 1 {
            (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        TreReport {
            patients,
            cohort_mean_mm: m,
            cohort_sd_mm: sd,
        }
    }
}

/// Maps every fixed landmark through `fixed -> moving` and measures its
/// distance to the matching moving landmark.
pub fn tre_with(
    patient: &str,
    fixed: &LandmarkSet,
    moving: &LandmarkSet,
    map: impl Fn(Point3) -> Result<Point3>,
) -> Result<PatientTre> {
    let mut by_level: BTreeMap<StructureId, Vec<LandmarkError>> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for f in &fixed.landmarks {
        let Some(m) = moving.get(f.level, f.kind) else {
            unmatched.push(format!("fixed:{}:{}", f.level, f.kind.as_str()));
            continue;
        };
        let p = map(f.position_mm)?;
        let e = ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2) + (p[2] - m[2]).powi(2)).sqrt();
        by_level.entry(f.level).or_default().push(LandmarkError {
            level: f.level,
            kind: f.kind,
            error_mm: e,
        });
    }
    for m in &moving.landmarks {
        if fixed.get(m.level, m.kind).is_none() {
            unmatched.push(format!("moving:{}:{}", m.level, m.kind.as_str()));
        }
    }
    if by_level.is_empty() {
        return Err(Error::InvalidArgument("no matched landmark pairs".into()));
    }
    let mut p = PatientTre {
        patient: patient.to_string(),
        mean_mm: 0.0,
        vertebrae: by_level
            .into_iter()
            .map(|(level, mut landmarks)| {
                landmarks.sort_by_key(|l| l.kind);
                VertebraTre {
                    level,
                    mean_mm: 0.0,
                    landmarks,
                }
            })
            .collect(),
        unmatched,
    };
    let report = TreReport::from_patients(vec![p.clone()]);
    p = report.patients.into_iter().next().expect("one patient");
    Ok(p)
}

/// TRE through the same map the warp uses.
pub fn tre(
    patient: &str,
    fixed_lms: &LandmarkSet,
    moving_lms: &LandmarkSet,
    affine: &SimilarityTransform,
    field: &DisplacementField,
    fixed_geometry: &Geometry,
) -> Result<PatientTre> {
    tre_with(patient, fixed_lms, moving_lms, |p| total_transform_point(affine, field, fixed_geometry, p))
}

pub const STAGES: [&str; 6] = ["segmentation-ingest", "fusion", "affine", "deformable", "meshing", "total"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages: BTreeMap<String, f64>,
}

impl TimingReport {
    pub fn record(&mut self, stage: &str, seconds: f64) {
        *self.stages.entry(stage.to_string()).or_insert(0.0) += seconds.max(0.0);
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(stage, start.elapsed().as_secs_f64());
        out
    }

    pub fn get(&self, stage: &str) -> Option<f64> {
        self.stages.get(stage).copied()
    }

    pub fn total(&self) -> Option<f64> {
        self.get("total")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceEntry {
    pub structure: String,
    pub label: u16,
    pub dice: f64,
    pub both_empty: bool,
}

/// Published cohort figures, kept alongside desk results for comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub dsc_vertebral_bone: [f64; 2],
    pub dsc_discs: [f64; 2],
    pub dsc_neural: [f64; 2],
    pub tre_mm: [f64; 2],
    pub registration_seconds: f64,
    pub total_seconds: f64,
}

impl Default for ReferenceValues {
    fn default() -> Self {
        ReferenceValues {
            dsc_vertebral_bone: [0.95, 0.03],
            dsc_discs: [0.87, 0.04],
            dsc_neural: [0.92, 0.01],
            tre_mm: [1.73, 0.42],
            registration_seconds: 20.0,
            total_seconds: 155.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: Vec<DiceEntry>,
    pub tre: Option<TreReport>,
    /// Extra scalar diagnostics (initial TRE, final loss, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub metrics: Metrics,
    pub timings: TimingReport,
    pub reference: ReferenceValues,
}

impl Report {
    pub fn new(metrics: Metrics, timings: TimingReport) -> Self {
        Report {
            schema_version: REPORT_SCHEMA_VERSION.into(),
            metrics,
            timings,
            reference: ReferenceValues::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient,vertebra,kind,error_mm\n");
        if let Some(tre) = &self.metrics.tre {
            for p in &tre.patients {
                for e in p.errors() {
                    out.push_str(&format!("{},{},{},{}\n", p.patient, e.level, e.kind.as_str(), e.error_mm));
                }
            }
        }
        out
    }
}

/// Writes `path` (JSON) and the flat landmark table next to it (`.csv`).
pub fn emit_report(metrics: &Metrics, timings: &TimingReport, path: impl AsRef<Path>) -> Result<Report> {
    let path = path.as_ref();
    let report = Report::new(metrics.clone(), timings.clone());
    std::fs::write(path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(path, e))?;
    let csv = path.with_extension("csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(report)
}
