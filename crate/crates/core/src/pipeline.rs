//! End-to-end model construction for one case directory:
//! ingest, fuse, affine, deformable, merge, mesh, evaluate.
//!
//! A case directory holds `ct`, `mri`, `ct_seg` and `mri_seg` (each
//! `.nii.gz` or `.nii`), optionally `ct_seg_secondary` (fused into
//! `ct_seg`), `truth_seg` and the landmark files `landmarks_fixed.json` /
//! `landmarks_moving.json`. The phantom generator writes exactly this
//! layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::deform::{
    register_deformable_cancellable, save_field, warp_labels, warp_volume, write_trace_csv, DisplacementField,
    Registration, TraceRow,
};
use crate::error::{Error, Result};
use crate::eval::{dice, emit_report, tre, DiceEntry, LandmarkSet, Metrics, Report, TimingReport, TreReport};
use crate::fusion::{fuse_union, label_centroids, largest_component, merge_structures, FusionPolicy, MergePrecedence};
use crate::mesh::write_glb;
use crate::mesh::{build_scene, Palette, SmoothParams};
use crate::nifti_io::{load_label_map, load_volume, save_label_map, save_volume};
use crate::similarity::{estimate_similarity, pair_by_level, LandmarkPairSet, SimilarityTransform};
use crate::structure::{StructureClass, StructureId};
use crate::volume::{Geometry, Interpolation, LabelMap, Volume};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub ct: PathBuf,
    pub mri: PathBuf,
    pub ct_seg: PathBuf,
    pub mri_seg: PathBuf,
    pub ct_seg_secondary: Option<PathBuf>,
    pub truth_seg: Option<PathBuf>,
    pub landmarks_fixed: Option<PathBuf>,
    pub landmarks_moving: Option<PathBuf>,
}

pub const REQUIRED: [&str; 4] = ["ct", "mri", "ct_seg", "mri_seg"];

/// `<dir>/<stem>.nii.gz`, falling back to `.nii`.
pub fn find_volume(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

impl CaseFiles {
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let missing: Vec<&str> = REQUIRED.iter().copied().filter(|s| find_volume(dir, s).is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "case directory {} is missing {}",
                dir.display(),
                missing.join(", ")
            )));
        }
        let json = |name: &str| Some(dir.join(name)).filter(|p| p.is_file());
        let (landmarks_fixed, landmarks_moving) = match (json("landmarks_fixed.json"), json("landmarks_moving.json")) {
            (Some(f), Some(m)) => (Some(f), Some(m)),
            _ => (None, None),
        };
        Ok(CaseFiles {
            ct: find_volume(dir, "ct").expect("checked"),
            mri: find_volume(dir, "mri").expect("checked"),
            ct_seg: find_volume(dir, "ct_seg").expect("checked"),
            mri_seg: find_volume(dir, "mri_seg").expect("checked"),
            ct_seg_secondary: find_volume(dir, "ct_seg_secondary"),
            truth_seg: find_volume(dir, "truth_seg"),
            landmarks_fixed,
            landmarks_moving,
        })
    }
}

pub struct CaseData {
    pub ct: Volume,
    pub mri: Volume,
    pub ct_seg: LabelMap,
    pub ct_seg_secondary: Option<LabelMap>,
    pub mri_seg: LabelMap,
    pub truth_seg: Option<LabelMap>,
    pub landmarks: Option<(LandmarkSet, LandmarkSet)>,
}

impl CaseData {
    pub fn load(files: &CaseFiles) -> Result<Self> {
        let ct = load_volume(&files.ct)?;
        let mri = load_volume(&files.mri)?;
        let ct_seg = load_label_map(&files.ct_seg)?;
        ct.geometry().ensure_matches(ct_seg.geometry(), "ct_seg vs ct")?;
        let mri_seg = load_label_map(&files.mri_seg)?;
        mri.geometry().ensure_matches(mri_seg.geometry(), "mri_seg vs mri")?;
        let ct_seg_secondary = files.ct_seg_secondary.as_ref().map(load_label_map).transpose()?;
        let truth_seg = files.truth_seg.as_ref().map(load_label_map).transpose()?;
        let landmarks = match (&files.landmarks_fixed, &files.landmarks_moving) {
            (Some(f), Some(m)) => Some((LandmarkSet::load(f)?, LandmarkSet::load(m)?)),
            _ => None,
        };
        Ok(CaseData {
            ct,
            mri,
            ct_seg,
            ct_seg_secondary,
            mri_seg,
            truth_seg,
            landmarks,
        })
    }
}

/// Union of the two vertebral segmentations, then the largest connected
/// component of every label.
pub fn fuse_segmentations(primary: &LabelMap, secondary: Option<&LabelMap>, policy: &FusionPolicy) -> Result<LabelMap> {
    let mut fused = match secondary {
        Some(s) => fuse_union(primary, s, policy)?,
        None => primary.clone(),
    };
    for l in fused.present_labels() {
        fused = largest_component(&fused, l);
    }
    Ok(fused)
}

/// Vertebrae and sacrum: the structures whose centroids drive the affine fit.
pub fn landmark_levels() -> BTreeSet<StructureId> {
    StructureId::all().filter(|s| s.is_level()).collect()
}

pub fn estimate_affine(fixed_seg: &LabelMap, moving_seg: &LabelMap) -> Result<(SimilarityTransform, LandmarkPairSet)> {
    let levels = landmark_levels();
    let pairs = pair_by_level(&label_centroids(moving_seg, &levels), &label_centroids(fixed_seg, &levels))?;
    let t = estimate_similarity(&pairs)?;
    Ok((t, pairs))
}

fn retain(lm: &LabelMap, keep: impl Fn(StructureId) -> bool) -> LabelMap {
    let data = lm
        .data()
        .iter()
        .map(|&l| match StructureId::from_label(l) {
            Ok(id) if l != 0 && keep(id) => l,
            _ => 0,
        })
        .collect();
    LabelMap::new(lm.geometry().clone(), data, lm.label_table().clone()).expect("subset of a valid label map")
}

/// Fused CT bone plus the MRI soft tissue (discs, ligament, neural
/// structures) resampled into CT space.
pub fn build_model(
    bone: &LabelMap,
    warped_mri_seg: &LabelMap,
    precedence: &MergePrecedence,
) -> Result<LabelMap> {
    let bone = retain(bone, |s| s.is_level());
    let soft = retain(warped_mri_seg, |s| !s.is_level() && s.class().is_some());
    merge_structures(&bone, &soft, precedence)
}

fn is_bone(id: StructureId) -> bool {
    matches!(id.class(), Some(StructureClass::Vertebra | StructureClass::Sacrum))
}

/// Per-structure Dice between the model and a reference over every
/// structure present in either.
pub fn dice_table(model: &LabelMap, reference: &LabelMap) -> Result<Vec<DiceEntry>> {
    let labels: BTreeSet<u16> = model.present_labels().into_iter().chain(reference.present_labels()).collect();
    labels
        .into_iter()
        .map(|l| {
            Ok(DiceEntry {
                structure: StructureId::from_label(l).map(|s| s.to_string()).unwrap_or_else(|_| l.to_string()),
                label: l,
                dice: dice(model, reference, l)?,
                both_empty: false,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SegmentationIngest,
    Fusion,
    Affine,
    Deformable,
    Merge,
    Meshing,
    Evaluation,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::SegmentationIngest => "segmentation-ingest",
            Stage::Fusion => "fusion",
            Stage::Affine => "affine",
            Stage::Deformable => "deformable",
            Stage::Merge => "merge",
            Stage::Meshing => "meshing",
            Stage::Evaluation => "evaluation",
        }
    }

    /// Timing bucket; merging is part of model construction.
    fn timing_key(self) -> &'static str {
        match self {
            Stage::Merge => "meshing",
            s => s.as_str(),
        }
    }
}

/// Hooks into a running pipeline. Every method has a no-op default.
pub trait Observer {
    fn stage_started(&mut self, _stage: Stage) {}
    fn iteration(&mut self, _row: &TraceRow) {}
    /// Called with the optimized field before it is used or saved.
    fn field_ready(&mut self, _field: &mut DisplacementField) {}
}

impl Observer for () {}

pub const FUSED_SEG: &str = "fused_seg.nii.gz";
pub const AFFINE: &str = "affine.json";
pub const FIELD: &str = "field.nii.gz";
pub const TRACE: &str = "trace.csv";
pub const WARPED_MRI: &str = "warped_mri.nii.gz";
pub const WARPED_MRI_SEG: &str = "warped_mri_seg.nii.gz";
pub const MODEL_SEG: &str = "model_seg.nii.gz";
pub const MODEL_GLB: &str = "model.glb";
pub const REPORT: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    pub fused_seg: PathBuf,
    pub affine: PathBuf,
    pub field: PathBuf,
    pub trace: PathBuf,
    pub warped_mri: PathBuf,
    pub warped_mri_seg: PathBuf,
    pub model_seg: PathBuf,
    pub model_glb: PathBuf,
    pub report: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Artifacts {
            fused_seg: dir.join(FUSED_SEG),
            affine: dir.join(AFFINE),
            field: dir.join(FIELD),
            trace: dir.join(TRACE),
            warped_mri: dir.join(WARPED_MRI),
            warped_mri_seg: dir.join(WARPED_MRI_SEG),
            model_seg: dir.join(MODEL_SEG),
            model_glb: dir.join(MODEL_GLB),
            report: dir.join(REPORT),
        }
    }

    /// Artifacts that exist on disk, by name.
    pub fn existing(&self) -> BTreeMap<&'static str, PathBuf> {
        [
            ("fused_seg", &self.fused_seg),
            ("affine", &self.affine),
            ("field", &self.field),
            ("trace", &self.trace),
            ("warped_mri", &self.warped_mri),
            ("warped_mri_seg", &self.warped_mri_seg),
            ("model_seg", &self.model_seg),
            ("model_glb", &self.model_glb),
            ("report", &self.report),
        ]
        .into_iter()
        .filter(|(_, p)| p.is_file())
        .map(|(n, p)| (n, p.clone()))
        .collect()
    }
}

pub struct PipelineRun {
    pub report: Report,
    pub artifacts: Artifacts,
    pub affine: SimilarityTransform,
    pub registration: Registration,
    pub model: LabelMap,
}

pub fn save_affine(t: &SimilarityTransform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_string_pretty(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_affine(path: impl AsRef<Path>) -> Result<SimilarityTransform> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Meshes a label map and writes the binary glTF.
pub fn export_model(model: &LabelMap, smoothing: SmoothParams, path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let scene = build_scene(model, &Palette::default(), smoothing)?;
    let bytes = write_glb(&scene)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Evaluation against whatever ground truth the case carries.
pub fn evaluate_case(
    data: &CaseData,
    model: &LabelMap,
    warped_mri_seg: &LabelMap,
    affine: &SimilarityTransform,
    registration: &Registration,
) -> Result<Metrics> {
    let g = data.ct.geometry();
    let mut metrics = Metrics::default();
    metrics.dice = match &data.truth_seg {
        Some(truth) => dice_table(model, truth)?,
        // Without ground truth: agreement of CT bone and registered MRI bone.
        None => dice_table(&retain(model, is_bone), &retain(warped_mri_seg, is_bone))?,
    };
    for e in &mut metrics.dice {
        e.both_empty = false;
    }
    if let Some((fixed, moving)) = &data.landmarks {
        let zero = DisplacementField::zeros(g.dims(), registration.field.stride())?;
        let initial = tre("case", fixed, moving, &SimilarityTransform::identity(), &zero, g)?;
        let after_affine = tre("case", fixed, moving, affine, &zero, g)?;
        let fin = tre("case", fixed, moving, affine, &registration.field, g)?;
        let voxel = g.spacing().iter().product::<f64>().cbrt();
        metrics.extra.insert("tre_initial_mm".into(), initial.mean_mm);
        metrics.extra.insert("tre_affine_mm".into(), after_affine.mean_mm);
        metrics.extra.insert("tre_final_mm".into(), fin.mean_mm);
        metrics.extra.insert("tre_initial_voxels".into(), initial.mean_mm / voxel);
        metrics.extra.insert("tre_final_voxels".into(), fin.mean_mm / voxel);
        metrics.tre = Some(TreReport::from_patients(vec![fin]));
    }
    if let Some(last) = registration.trace.last() {
        metrics.extra.insert("loss_initial".into(), registration.trace[0].loss);
        metrics.extra.insert("loss_final".into(), last.loss);
        let tail = &registration.trace[registration.trace.len().saturating_sub(50)..];
        let increases = tail.windows(2).filter(|w| w[1].loss > w[0].loss).count();
        metrics.extra.insert("loss_increases_last50".into(), increases as f64);
    }
    metrics.extra.insert("field_max_abs_voxels".into(), registration.field.max_abs());
    Ok(metrics)
}

struct Runner<'a> {
    timings: TimingReport,
    cancel: &'a AtomicBool,
    observer: &'a mut dyn Observer,
}

impl Runner<'_> {
    fn stage<T>(&mut self, stage: Stage, f: impl FnOnce(&mut dyn Observer) -> Result<T>) -> Result<T> {
        if self.cancel.load(Ordering::Relaxed) {
            return Err(Error::Cancelled);
        }
        info!("stage {}", stage.as_str());
        self.observer.stage_started(stage);
        let start = Instant::now();
        let out = f(self.observer).map_err(|e| match e {
            Error::Cancelled => Error::Cancelled,
            e => Error::Stage {
                stage: stage.as_str(),
                source: Box::new(e),
            },
        });
        self.timings.record(stage.timing_key(), start.elapsed().as_secs_f64());
        out
    }
}

pub fn run_pipeline(files: &CaseFiles, out_dir: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<PipelineRun> {
    run_pipeline_with(files, out_dir, cfg, &AtomicBool::new(false), &mut ())
}

/// Full pipeline with cancellation (checked between stages and every
/// registration iteration) and an observer.
pub fn run_pipeline_with(
    files: &CaseFiles,
    out_dir: impl AsRef<Path>,
    cfg: &PipelineConfig,
    cancel: &AtomicBool,
    observer: &mut dyn Observer,
) -> Result<PipelineRun> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let artifacts = Artifacts::in_dir(out_dir);
    let total = Instant::now();
    let mut r = Runner {
        timings: TimingReport::default(),
        cancel,
        observer,
    };
    let data = r.stage(Stage::SegmentationIngest, |_| {
        cfg.validate()?;
        CaseData::load(files)
    })?;
    let g: Geometry = data.ct.geometry().clone();
    let fused = r.stage(Stage::Fusion, |_| {
        let fused = fuse_segmentations(&data.ct_seg, data.ct_seg_secondary.as_ref(), &cfg.fusion)?;
        save_label_map(&fused, &artifacts.fused_seg)?;
        Ok(fused)
    })?;
    let affine = r.stage(Stage::Affine, |_| {
        let (t, pairs) = estimate_affine(&fused, &data.mri_seg)?;
        info!("affine from {} level pairs, scale {:.4}", pairs.pairs.len(), t.scale());
        save_affine(&t, &artifacts.affine)?;
        Ok(t)
    })?;
    let registration = r.stage(Stage::Deformable, |obs| {
        let mut reg = register_deformable_cancellable(&data.ct, &data.mri, &affine, &cfg.registration, cancel)?;
        for row in &reg.trace {
            obs.iteration(row);
        }
        obs.field_ready(&mut reg.field);
        if reg.field.nodes().iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        save_field(&reg.field, &g, &cfg.registration, &artifacts.field)?;
        write_trace_csv(&reg.trace, &artifacts.trace)?;
        let warped = warp_volume(&data.mri, &g, &affine, &reg.field, Interpolation::Trilinear)?;
        save_volume(&warped, &artifacts.warped_mri)?;
        Ok(reg)
    })?;
    let (model, warped_seg) = r.stage(Stage::Merge, |_| {
        let warped_seg = warp_labels(&data.mri_seg, &g, &affine, &registration.field)?;
        save_label_map(&warped_seg, &artifacts.warped_mri_seg)?;
        let model = build_model(&fused, &warped_seg, &cfg.precedence)?;
        save_label_map(&model, &artifacts.model_seg)?;
        Ok((model, warped_seg))
    })?;
    r.stage(Stage::Meshing, |_| export_model(&model, cfg.smoothing, &artifacts.model_glb).map(|_| ()))?;
    let metrics = r.stage(Stage::Evaluation, |_| evaluate_case(&data, &model, &warped_seg, &affine, &registration))?;
    r.timings.record("total", total.elapsed().as_secs_f64());
    let report = emit_report(&metrics, &r.timings, &artifacts.report)?;
    Ok(PipelineRun {
        report,
        artifacts,
        affine,
        registration,
        model,
    })
}
