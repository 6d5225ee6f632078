//! Analytic lumbar-spine phantom with a known similarity + sinusoidal
//! deformation between the fixed (CT-like) and moving (MRI-like) images.
//!
//! Anatomy is defined on a 64-voxel reference frame and scaled to the
//! requested size. The moving image at `y` shows the fixed anatomy at
//! `psi(y) = S(y) + u(S(y))`, remapped by a monotone nonlinear intensity
//! curve. Moving landmarks are `psi^-1` of the fixed ones.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{LandmarkKind, LandmarkSet, NamedLandmark, Space};
use crate::nifti_io;
use crate::similarity::SimilarityTransform;
use crate::structure::StructureId;
use crate::volume::{Geometry, LabelMap, Point3, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub size: usize,
    /// Peak sinusoidal displacement in voxels.
    pub deform_amp: f64,
    /// Wavelength of the deformation as a multiple of `size`.
    pub wavelength: f64,
    pub rotation_deg: [f64; 3],
    pub scale: f64,
    /// Translation in reference-frame voxels (scaled with `size`).
    pub translation: [f64; 3],
    pub smoothing_sigma: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            size: 64,
            deform_amp: 5.0,
            wavelength: 1.25,
            rotation_deg: [2.0, -1.5, 4.0],
            scale: 1.0,
            translation: [3.0, -2.0, 2.5],
            smoothing_sigma: 0.6,
        }
    }
}

// (structure, z range) in the 64-voxel reference frame, inferior first.
const LEVELS: [(StructureId, f64, f64); 5] = [
    (StructureId::L5, 10.0, 18.0),
    (StructureId::L4, 21.0, 29.0),
    (StructureId::L3, 32.0, 40.0),
    (StructureId::L2, 43.0, 51.0),
    (StructureId::L1, 54.0, 62.0),
];
const SACRUM_Z: (f64, f64) = (2.0, 7.0);
const MID_X: f64 = 32.0;
const BODY_Y: f64 = 40.0;
const CANAL_Y: f64 = 27.0;

fn in_range(z: f64, lo: f64, hi: f64) -> bool {
    z >= lo && z < hi
}

/// Anterior offset of the spinal column (lumbar lordosis).
fn lordosis(z: f64) -> f64 {
    6.0 * (1.0 - ((z - 36.0) / 30.0).powi(2))
}

/// Label at a reference-frame point.
pub fn reference_label(p: Point3) -> u16 {
    let [x, y, z] = p;
    let y = y - lordosis(z);
    let dx = x - MID_X;
    let r_canal = (dx * dx + (y - CANAL_Y).powi(2)).sqrt();
    let body = |rx: f64, ry: f64| (dx / rx).powi(2) + ((y - BODY_Y) / ry).powi(2) <= 1.0;

    if in_range(z, 8.0, 63.0) && r_canal <= 2.5 {
        return StructureId::SPINAL_CORD.label();
    }
    // Discs sit between consecutive bodies: below L5 (to sacrum) and above.
    let mut discs = vec![(StructureId::disc_below(24).unwrap(), SACRUM_Z.1, LEVELS[0].1)];
    for w in LEVELS.windows(2) {
        discs.push((StructureId::disc_below(w[1].0.label()).unwrap(), w[0].2, w[1].1));
    }
    for &(_, lo, hi) in &discs {
        let zc = 0.5 * (lo + hi);
        if (z - zc).abs() <= 1.2 && (y - CANAL_Y).abs() <= 1.5 && dx.abs() >= 4.0 && dx.abs() <= 11.0 {
            return StructureId::NERVE_ROOTS.label();
        }
    }
    if in_range(z, 4.0, 63.0) && r_canal <= 4.0 {
        return StructureId::CSF.label();
    }
    for &(id, lo, hi) in &discs {
        if in_range(z, lo, hi) {
            if r_canal > 4.0 && r_canal <= 6.0 && y < CANAL_Y {
                return StructureId::LIGAMENTUM_FLAVUM.label();
            }
            if body(8.5, 6.5) {
                return id.label();
            }
        }
    }
    for &(id, lo, hi) in &LEVELS {
        if !in_range(z, lo, hi) {
            continue;
        }
        let inner = in_range(z, lo + 1.0, hi - 1.0);
        let process = in_range(z, lo + 2.0, hi - 2.0);
        let arch = inner && r_canal > 4.5 && r_canal <= 7.5 && y <= 31.0;
        let pedicle = inner && dx.abs() > 4.5 && dx.abs() <= 7.5 && (27.0..=34.0).contains(&y);
        let spinous = process && dx.abs() <= 1.5 && (12.0..=21.0).contains(&y);
        let transverse = process && (25.5..=29.5).contains(&y) && dx.abs() >= 7.0 && dx.abs() <= 17.0;
        if body(9.0, 7.0) || arch || pedicle || spinous || transverse {
            return id.label();
        }
    }
    if in_range(z, SACRUM_Z.0, SACRUM_Z.1) && (dx / 12.0).powi(2) + ((y - 33.0) / 9.0).powi(2) <= 1.0 {
        return StructureId::SACRUM.label();
    }
    0
}

fn inside_body_outline(p: Point3) -> bool {
    ((p[0] - MID_X) / 29.0).powi(2) + ((p[1] - 32.0) / 26.0).powi(2) <= 1.0
}

/// CT-like intensity at a reference-frame point.
pub fn reference_ct(p: Point3) -> f32 {
    let label = reference_label(p);
    let texture = (p[0] / 2.7).sin() * (p[1] / 3.1).sin() * (p[2] / 2.3).sin();
    let v = match StructureId::from_label(label).ok() {
        None => {
            if inside_body_outline(p) {
                40.0 + 25.0 * texture
            } else {
                -1000.0
            }
        }
        Some(id) if id.is_vertebra() || id == StructureId::SACRUM => 700.0 + 150.0 * texture,
        Some(id) if id == StructureId::SPINAL_CORD || id == StructureId::NERVE_ROOTS => 35.0,
        Some(id) if id == StructureId::CSF => 5.0,
        Some(id) if id == StructureId::LIGAMENTUM_FLAVUM => 70.0,
        Some(_) => 95.0 + 10.0 * texture,
    };
    v as f32
}

/// Monotone nonlinear remap from CT-like to MRI-like intensities.
pub fn modality_remap(ct: f32) -> f32 {
    let t = ((ct as f64 + 1000.0) / 2000.0).clamp(0.0, 1.0);
    (1200.0 * t.sqrt() + 300.0 * t * t) as f32
}

pub struct Phantom {
    pub params: PhantomParams,
    pub ct: Volume,
    pub mri: Volume,
    pub ct_seg: LabelMap,
    pub ct_seg_secondary: LabelMap,
    pub mri_seg: LabelMap,
    /// Ground-truth labels in fixed space.
    pub truth_seg: LabelMap,
    pub landmarks_fixed: LandmarkSet,
    pub landmarks_moving: LandmarkSet,
    /// Fixed-voxel displacement to the true moving voxel (`psi^-1(x) - x`).
    pub truth_field: [Vec<f32>; 3],
    /// The similarity part of `psi` (moving mm to fixed mm).
    pub similarity: SimilarityTransform,
}

/// Moving-to-fixed world map of the phantom.
#[derive(Clone, Debug)]
pub struct PhantomWarp {
    similarity: SimilarityTransform,
    amp: f64,
    wavelength: f64,
}

impl PhantomWarp {
    pub fn new(params: &PhantomParams) -> Result<Self> {
        let n = params.size as f64;
        let k = n / 64.0;
        let [rx, ry, rz] = params.rotation_deg.map(f64::to_radians);
        let r: Matrix3<f64> = *Rotation3::from_euler_angles(rx, ry, rz).matrix();
        let c = Vector3::repeat((n - 1.0) / 2.0);
        let t = Vector3::from(params.translation) * k;
        // y -> s R (y - c) + c + t
        let translation = c + t - params.scale * (r * c);
        let similarity = SimilarityTransform::new(r, params.scale, translation)?;
        Ok(PhantomWarp {
            similarity,
            amp: params.deform_amp,
            wavelength: params.wavelength * n,
        })
    }

    pub fn similarity(&self) -> &SimilarityTransform {
        &self.similarity
    }

    fn u(&self, x: Point3) -> Point3 {
        let w = 2.0 * PI / self.wavelength;
        [
            self.amp * (w * x[2]).sin(),
            0.6 * self.amp * (w * x[2] + 0.5).cos(),
            0.4 * self.amp * (w * x[1]).sin(),
        ]
    }

    /// Moving mm to fixed mm.
    pub fn apply(&self, y: Point3) -> Point3 {
        let s = self.similarity.apply(y);
        let u = self.u(s);
        [s[0] + u[0], s[1] + u[1], s[2] + u[2]]
    }

    /// Fixed mm to moving mm by Newton iteration on `apply`.
    pub fn invert(&self, p: Point3) -> Result<Point3> {
        let target = Vector3::from(p);
        let mut y = Vector3::from(self.similarity.apply_inverse(p));
        for _ in 0..50 {
            let f = Vector3::from(self.apply(y.into())) - target;
            if f.norm() < 1e-11 {
                return Ok(y.into());
            }
            let h = 1e-5;
            let mut j = Matrix3::zeros();
            for a in 0..3 {
                let mut yp = y;
                let mut ym = y;
                yp[a] += h;
                ym[a] -= h;
                let d = (Vector3::from(self.apply(yp.into())) - Vector3::from(self.apply(ym.into()))) / (2.0 * h);
                j.set_column(a, &d);
            }
            let step = j.try_inverse().ok_or_else(|| Error::Degenerate("phantom warp Jacobian".into()))? * f;
            y -= step;
        }
        Err(Error::Degenerate(format!("phantom warp inversion did not converge at {p:?}")))
    }
}

impl Phantom {
    pub fn generate(params: &PhantomParams) -> Result<Phantom> {
        if params.size < 16 {
            return Err(Error::InvalidArgument(format!("phantom size must be >= 16, got {}", params.size)));
        }
        if !(params.deform_amp >= 0.0) || !(params.wavelength > 0.0) || !(params.smoothing_sigma >= 0.0) {
            return Err(Error::InvalidArgument("phantom amplitude, wavelength and sigma must be non-negative".into()));
        }
        let n = params.size;
        let k = n as f64 / 64.0;
        let to_ref = |p: Point3| p.map(|v| v / k);
        let geometry = Geometry::identity([n, n, n]);
        let warp = PhantomWarp::new(params)?;

        let ct = Volume::from_fn(geometry.clone(), |[x, y, z]| reference_ct(to_ref([x as f64, y as f64, z as f64])))
            .gaussian_smooth(params.smoothing_sigma)?;
        let mri = Volume::from_fn(geometry.clone(), |[x, y, z]| {
            reference_ct(to_ref(warp.apply([x as f64, y as f64, z as f64])))
        })
        .gaussian_smooth(params.smoothing_sigma)?;
        let mri = Volume::new(geometry.clone(), mri.data().iter().map(|&v| modality_remap(v)).collect())?;

        let truth_data: Vec<u16> = (0..geometry.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = geometry.coords(i);
                reference_label(to_ref([x as f64, y as f64, z as f64]))
            })
            .collect();
        let truth_seg = LabelMap::with_canonical_table(geometry.clone(), truth_data)?;
        let is_bone = |l: u16| StructureId::from_label(l).map(|s| s.is_vertebra()).unwrap_or(false);
        let ct_seg = LabelMap::with_canonical_table(
            geometry.clone(),
            truth_seg.data().iter().map(|&l| if is_bone(l) { l } else { 0 }).collect(),
        )?;
        // A second, slightly generous segmenter that also finds the sacrum.
        let secondary: Vec<u16> = (0..geometry.len())
            .into_par_iter()
            .map(|i| {
                let l = truth_seg.data()[i];
                if is_bone(l) || l == StructureId::SACRUM.label() {
                    return l;
                }
                let [x, y, z] = geometry.coords(i);
                let p = to_ref([x as f64, y as f64, z as f64]);
                let l2 = reference_label([p[0], p[1] + 0.6, p[2]]);
                if is_bone(l2) { l2 } else { 0 }
            })
            .collect();
        let ct_seg_secondary = LabelMap::with_canonical_table(geometry.clone(), secondary)?;
        let mri_data: Vec<u16> = (0..geometry.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = geometry.coords(i);
                reference_label(to_ref(warp.apply([x as f64, y as f64, z as f64])))
            })
            .collect();
        let mri_seg = LabelMap::with_canonical_table(geometry.clone(), mri_data)?;

        let mut fixed_lms = Vec::new();
        let mut moving_lms = Vec::new();
        for &(id, lo, hi) in &LEVELS {
            let zc = 0.5 * (lo + hi);
            for (kind, p) in [
                (LandmarkKind::Spinous, [MID_X, 12.5 + lordosis(zc), zc]),
                (LandmarkKind::LeftTransverse, [MID_X - 12.0, CANAL_Y + 0.5 + lordosis(zc), zc]),
                (LandmarkKind::RightTransverse, [MID_X + 12.0, CANAL_Y + 0.5 + lordosis(zc), zc]),
            ] {
                let pf = p.map(|v| v * k);
                fixed_lms.push(NamedLandmark {
                    level: id,
                    kind,
                    position_mm: pf,
                });
                moving_lms.push(NamedLandmark {
                    level: id,
                    kind,
                    position_mm: warp.invert(pf)?,
                });
            }
        }

        let inverse: Vec<Point3> = (0..geometry.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = geometry.coords(i);
                let p = [x as f64, y as f64, z as f64];
                warp.invert(p).map(|q| [q[0] - p[0], q[1] - p[1], q[2] - p[2]])
            })
            .collect::<Result<_>>()?;
        let truth_field = std::array::from_fn(|c| inverse.iter().map(|d| d[c] as f32).collect());

        Ok(Phantom {
            params: params.clone(),
            ct,
            mri,
            ct_seg,
            ct_seg_secondary,
            mri_seg,
            truth_seg,
            landmarks_fixed: LandmarkSet::new(Space::Fixed, fixed_lms)?,
            landmarks_moving: LandmarkSet::new(Space::Moving, moving_lms)?,
            truth_field,
            similarity: warp.similarity().clone(),
        })
    }

    /// Writes the case in the layout read by [`crate::pipeline::CaseFiles`].
    pub fn write_case(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        nifti_io::save_volume(&self.ct, dir.join("ct.nii.gz"))?;
        nifti_io::save_volume(&self.mri, dir.join("mri.nii.gz"))?;
        nifti_io::save_label_map(&self.ct_seg, dir.join("ct_seg.nii.gz"))?;
        nifti_io::save_label_map(&self.ct_seg_secondary, dir.join("ct_seg_secondary.nii.gz"))?;
        nifti_io::save_label_map(&self.mri_seg, dir.join("mri_seg.nii.gz"))?;
        nifti_io::save_label_map(&self.truth_seg, dir.join("truth_seg.nii.gz"))?;
        self.landmarks_fixed.save(dir.join("landmarks_fixed.json"))?;
        self.landmarks_moving.save(dir.join("landmarks_moving.json"))?;
        nifti_io::save_vector_field(self.ct.geometry(), &self.truth_field, dir.join("truth_field.nii.gz"))?;
        let meta = serde_json::json!({
            "params": self.params,
            "similarity": self.similarity,
        });
        let p = dir.join("phantom.json");
        std::fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&p, e))
    }
}
