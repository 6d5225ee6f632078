//! Landmark-based similarity alignment (rotation, one uniform scale,
//! translation) estimated in closed form from paired vertebral centroids.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Centroids;
use crate::structure::StructureId;
use crate::volume::{Geometry, Interpolation, LabelMap, Point3, Volume};

/// `p_fixed = scale * R * p_moving + t`, all in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTransform {
    rotation: Matrix3<f64>,
    scale: f64,
    translation: Vector3<f64>,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, scale: f64, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho >= 1e-9 || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not proper orthonormal (|RtR - I| = {ortho:e}, det = {})",
                rotation.determinant()
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(SimilarityTransform {
            rotation,
            scale,
            translation,
        })
    }

    pub fn translation_only(t: Point3) -> Self {
        SimilarityTransform {
            translation: Vector3::from(t),
            ..Self::identity()
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Moving-space point to fixed space.
    pub fn apply(&self, p: Point3) -> Point3 {
        let v = self.scale * (self.rotation * Vector3::from(p)) + self.translation;
        [v.x, v.y, v.z]
    }

    /// Fixed-space point to moving space.
    pub fn apply_inverse(&self, p: Point3) -> Point3 {
        let v = self.rotation.transpose() * (Vector3::from(p) - self.translation) / self.scale;
        [v.x, v.y, v.z]
    }

    pub fn apply_to_points(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|p| self.apply(*p)).collect()
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            rotation: rt,
            scale: 1.0 / self.scale,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    pub fn compose(&self, first: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            rotation: self.rotation * first.rotation,
            scale: self.scale * first.scale,
            translation: self.scale * (self.rotation * first.translation) + self.translation,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Pull-back resampling of a moving-space volume onto the fixed grid.
    pub fn apply_to_volume(&self, moving: &Volume, fixed: &Geometry) -> Volume {
        moving.resample_into(fixed, |p| self.apply_inverse(p), Interpolation::Trilinear)
    }

    pub fn apply_to_labels(&self, moving: &LabelMap, fixed: &Geometry) -> LabelMap {
        moving.resample_into(fixed, |p| self.apply_inverse(p))
    }
}

/// JSON form: row-major 4x4 matrix plus the decomposed parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformJson {
    pub matrix: [[f64; 4]; 4],
    pub rotation: [[f64; 3]; 3],
    pub scale: f64,
    pub translation: [f64; 3],
}

impl From<&SimilarityTransform> for TransformJson {
    fn from(t: &SimilarityTransform) -> Self {
        let m = t.to_matrix();
        TransformJson {
            matrix: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| t.rotation[(r, c)])),
            scale: t.scale,
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformJson> for SimilarityTransform {
    type Error = Error;

    fn try_from(j: TransformJson) -> Result<Self> {
        let rotation = Matrix3::from_fn(|r, c| j.rotation[r][c]);
        SimilarityTransform::new(rotation, j.scale, Vector3::from(j.translation))
    }
}

impl Serialize for SimilarityTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TransformJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SimilarityTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = TransformJson::deserialize(d)?;
        SimilarityTransform::try_from(j).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPair {
    pub level: StructureId,
    pub moving: Point3,
    pub fixed: Point3,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPairSet {
    pub pairs: Vec<LandmarkPair>,
    /// Levels present only in the moving set.
    pub unmatched_moving: Vec<StructureId>,
    /// Levels present only in the fixed set.
    pub unmatched_fixed: Vec<StructureId>,
}

pub const MIN_LANDMARKS: usize = 3;

pub fn pair_by_level(moving: &Centroids, fixed: &Centroids) -> Result<LandmarkPairSet> {
    let m: BTreeMap<_, _> = moving.found.iter().copied().collect();
    let f: BTreeMap<_, _> = fixed.found.iter().copied().collect();
    let mut set = LandmarkPairSet::default();
    for (level, mp) in &m {
        match f.get(level) {
            Some(fp) => set.pairs.push(LandmarkPair {
                level: *level,
                moving: *mp,
                fixed: *fp,
            }),
            None => set.unmatched_moving.push(*level),
        }
    }
    set.unmatched_fixed = f.keys().filter(|l| !m.contains_key(l)).copied().collect();
    if set.pairs.len() < MIN_LANDMARKS {
        return Err(Error::InsufficientLandmarks {
            found: set.pairs.len(),
            required: MIN_LANDMARKS,
        });
    }
    Ok(set)
}

fn mean(points: impl Iterator<Item = Point3>) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    let mut n = 0.0;
    for p in points {
        sum += Vector3::from(p);
        n += 1.0;
    }
    sum / n
}

/// Least-squares similarity fit from paired points.
///
fn check_spread(cov: &Matrix3<f64>, which: &str) -> Result<()> {
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-10 * ev[0] {
        return Err(Error::Degenerate(format!(
            "{which} landmarks are collinear or coincident (covariance eigenvalues {ev:?})"
        )));
    }
    if ev[1] < 1e-3 * ev[0] {
        warn!("{which} landmarks are nearly collinear; rotation about their axis is poorly determined");
    }
    Ok(())
}

/// Both sets are demeaned, the cross-covariance is decomposed by SVD, and
/// the rotation is built with a reflection guard so it is always proper.
/// Scale is the guarded singular-value trace over the moving-set variance;
/// translation then aligns the centroids.
pub fn estimate_similarity(pairs: &LandmarkPairSet) -> Result<SimilarityTransform> {
    let n = pairs.pairs.len();
    if n < MIN_LANDMARKS {
        return Err(Error::InsufficientLandmarks {
            found: n,
            required: MIN_LANDMARKS,
        });
    }
    let mu_m = mean(pairs.pairs.iter().map(|p| p.moving));
    let mu_f = mean(pairs.pairs.iter().map(|p| p.fixed));

    let mut cross = Matrix3::zeros();
    let mut moving_cov = Matrix3::zeros();
    let mut fixed_cov = Matrix3::zeros();
    let mut moving_var = 0.0;
    for p in &pairs.pairs {
        let dm = Vector3::from(p.moving) - mu_m;
        let df = Vector3::from(p.fixed) - mu_f;
        cross += df * dm.transpose();
        moving_cov += dm * dm.transpose();
        fixed_cov += df * df.transpose();
        moving_var += dm.norm_squared();
    }
    let inv_n = 1.0 / n as f64;
    cross *= inv_n;
    moving_cov *= inv_n;
    fixed_cov *= inv_n;
    moving_var *= inv_n;

    check_spread(&moving_cov, "moving")?;
    check_spread(&fixed_cov, "fixed")?;

    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let d = svd.singular_values;
    let mut guard = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Flip the axis of the smallest singular value.
        let (smallest, _) = d.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &s)| {
            if s < acc.1 { (i, s) } else { acc }
        });
        guard[(smallest, smallest)] = -1.0;
    }
    let rotation = u * guard * v_t;
    let trace: f64 = (0..3).map(|i| d[i] * guard[(i, i)]).sum();
    let scale = trace / moving_var;
    if !(scale > 0.0) {
        return Err(Error::Degenerate(format!("non-positive scale estimate {scale}")));
    }
    let translation = mu_f - scale * (rotation * mu_m);
    if !(0.95..=1.05).contains(&scale) {
        warn!("similarity scale {scale:.4} outside [0.95, 1.05]; check scanner calibration");
    }
    SimilarityTransform::new(rotation, scale, translation)
}

/// Per-pair residual `|T(moving) - fixed|` in mm.
pub fn residuals(t: &SimilarityTransform, pairs: &LandmarkPairSet) -> Vec<f64> {
    pairs
        .pairs
        .iter()
        .map(|p| {
            let q = t.apply(p.moving);
            (Vector3::from(q) - Vector3::from(p.fixed)).norm()
        })
        .collect()
}
