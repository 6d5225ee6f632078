//! Volumes, label maps and the index/world geometry they share.
//!
//! Data is stored x-fastest: `index = x + nx * (y + ny * z)`. World
//! coordinates are millimetres; voxel centres sit at integer voxel
//! coordinates.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::structure::StructureId;

pub type Point3 = [f64; 3];

const MIN_ABS_DET: f64 = 1e-12;

/// Voxel grid extent plus the index-to-world affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    index_to_world: Matrix4<f64>,
    world_to_index: Matrix4<f64>,
}

impl Geometry {
    pub fn new(dims: [usize; 3], index_to_world: Matrix4<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("dims must be positive, got {dims:?}")));
        }
        if index_to_world.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("index_to_world affine".into()));
        }
        let det = index_to_world.fixed_view::<3, 3>(0, 0).determinant();
        if det.abs() <= MIN_ABS_DET {
            return Err(Error::NonInvertibleAffine { det });
        }
        let world_to_index = index_to_world
            .try_inverse()
            .ok_or(Error::NonInvertibleAffine { det })?;
        Ok(Geometry {
            dims,
            index_to_world,
            world_to_index,
        })
    }

    /// Axis-aligned grid with origin at world zero.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        let affine = Matrix4::new_nonuniform_scaling(&Vector3::from(spacing));
        Self::new(dims, affine)
    }

    pub fn identity(dims: [usize; 3]) -> Self {
        Self::new(dims, Matrix4::identity()).expect("identity geometry is valid")
    }

    pub fn with_origin(mut self, origin: Point3) -> Self {
        self.index_to_world[(0, 3)] = origin[0];
        self.index_to_world[(1, 3)] = origin[1];
        self.index_to_world[(2, 3)] = origin[2];
        self.world_to_index = self.index_to_world.try_inverse().expect("checked at construction");
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_to_world(&self) -> &Matrix4<f64> {
        &self.index_to_world
    }

    pub fn world_to_index(&self) -> &Matrix4<f64> {
        &self.world_to_index
    }

    /// Linear part of the index-to-world affine.
    pub fn linear(&self) -> Matrix3<f64> {
        self.index_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Per-axis voxel size in mm (column norms of the linear part).
    pub fn spacing(&self) -> [f64; 3] {
        let lin = self.linear();
        [lin.column(0).norm(), lin.column(1).norm(), lin.column(2).norm()]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.linear().determinant().abs()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let yz = index / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    pub fn voxel_to_world(&self, p: Point3) -> Point3 {
        transform_point(&self.index_to_world, p)
    }

    pub fn world_to_voxel(&self, p: Point3) -> Point3 {
        transform_point(&self.world_to_index, p)
    }

    /// True if the continuous voxel coordinate lies within the voxel-centre hull.
    pub fn contains_voxel(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= (self.dims[a] - 1) as f64)
    }

    /// Equal dims and affines within `tol` mm.
    pub fn matches(&self, other: &Geometry, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .index_to_world
                .iter()
                .zip(other.index_to_world.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn ensure_matches(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.matches(other, 1e-6) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}

pub(crate) fn transform_point(m: &Matrix4<f64>, p: Point3) -> Point3 {
    let v = m * Vector4::new(p[0], p[1], p[2], 1.0);
    [v.x, v.y, v.z]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

/// Scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        let data = vec![value; geometry.len()];
        Volume { geometry, data }
    }

    /// Evaluates `f` at every voxel's integer coordinates.
    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 3]) -> f32 + Sync) -> Self {
        let data = (0..geometry.len())
            .into_par_iter()
            .map(|i| f(geometry.coords(i)))
            .collect();
        Volume { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn sample(&self, p: Point3, mode: Interpolation) -> f32 {
        sample(&self.data, self.geometry.dims(), p, mode) as f32
    }

    pub fn gaussian_smooth(&self, sigma: f64) -> Result<Volume> {
        let mut data = self.data.clone();
        gaussian_smooth_in_place(&mut data, self.geometry.dims(), sigma)?;
        Ok(Volume {
            geometry: self.geometry.clone(),
            data,
        })
    }

    /// Pull-back resampling: output voxel `i` takes the source value at
    /// `mapping(world(i))`. Out-of-bounds samples clamp to the edge.
    pub fn resample_into(
        &self,
        target: &Geometry,
        mapping: impl Fn(Point3) -> Point3 + Sync,
        mode: Interpolation,
    ) -> Volume {
        let src_dims = self.geometry.dims();
        let data = (0..target.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = target.coords(i);
                let world = target.voxel_to_world([x as f64, y as f64, z as f64]);
                let p = self.geometry.world_to_voxel(mapping(world));
                sample(&self.data, src_dims, p, mode) as f32
            })
            .collect();
        Volume {
            geometry: target.clone(),
            data,
        }
    }
}

/// Integer label map sharing [`Volume`] geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    data: Vec<u16>,
    label_table: BTreeMap<u16, String>,
}

impl LabelMap {
    pub fn new(geometry: Geometry, data: Vec<u16>, label_table: BTreeMap<u16, String>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidArgument(format!(
                "label data length {} does not match dims {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        let lm = LabelMap {
            geometry,
            data,
            label_table,
        };
        if let Some(missing) = lm.present_labels().into_iter().find(|l| !lm.label_table.contains_key(l)) {
            return Err(Error::UnknownLabel(missing));
        }
        Ok(lm)
    }

    /// Builds the label table from canonical [`StructureId`] names.
    pub fn with_canonical_table(geometry: Geometry, data: Vec<u16>) -> Result<Self> {
        let mut table = BTreeMap::new();
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &data {
            if l != 0 && !seen[l as usize] {
                seen[l as usize] = true;
                table.insert(l, StructureId::from_label(l)?.to_string());
            }
        }
        Self::new(geometry, data, table)
    }

    pub fn empty(geometry: Geometry) -> Self {
        let data = vec![0; geometry.len()];
        LabelMap {
            geometry,
            data,
            label_table: BTreeMap::new(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn label_table(&self) -> &BTreeMap<u16, String> {
        &self.label_table
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Writes a voxel, registering a canonical name for new labels.
    pub fn set(&mut self, index: usize, label: u16) -> Result<()> {
        if label != 0 && !self.label_table.contains_key(&label) {
            let name = StructureId::from_label(label)?.to_string();
            self.label_table.insert(label, name);
        }
        self.data[index] = label;
        Ok(())
    }

    /// Sorted distinct nonzero labels.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn sample_nearest(&self, p: Point3) -> u16 {
        let dims = self.geometry.dims();
        let idx = nearest_index(dims, p);
        self.data[idx]
    }

    /// Nearest-neighbour pull-back resampling; samples falling outside the
    /// source grid become background.
    pub fn resample_into(&self, target: &Geometry, mapping: impl Fn(Point3) -> Point3 + Sync) -> LabelMap {
        let src = &self.geometry;
        let dims = src.dims();
        let data: Vec<u16> = (0..target.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = target.coords(i);
                let world = target.voxel_to_world([x as f64, y as f64, z as f64]);
                let p = src.world_to_voxel(mapping(world));
                let r = p.map(round_half_away);
                if (0..3).all(|a| r[a] >= 0.0 && r[a] < dims[a] as f64) {
                    self.data[src.index(r[0] as usize, r[1] as usize, r[2] as usize)]
                } else {
                    0
                }
            })
            .collect();
        let present: std::collections::BTreeSet<u16> = data.iter().copied().filter(|&l| l != 0).collect();
        let table = self
            .label_table
            .iter()
            .filter(|(l, _)| present.contains(l))
            .map(|(l, n)| (*l, n.clone()))
            .collect();
        LabelMap {
            geometry: target.clone(),
            data,
            label_table: table,
        }
    }
}

#[inline]
fn round_half_away(v: f64) -> f64 {
    v.round()
}

#[inline]
fn nearest_index(dims: [usize; 3], p: Point3) -> usize {
    let c = |a: usize| round_half_away(p[a]).clamp(0.0, (dims[a] - 1) as f64) as usize;
    c(0) + dims[0] * (c(1) + dims[1] * c(2))
}

#[inline]
fn cell(n: usize, p: f64) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let x = p.clamp(0.0, (n - 1) as f64);
    let i0 = (x.floor() as usize).min(n - 2);
    (i0, i0 + 1, x - i0 as f64)
}

/// Samples a scalar grid at continuous voxel coordinates with clamp-to-edge.
pub fn sample<T: Copy + Into<f64>>(data: &[T], dims: [usize; 3], p: Point3, mode: Interpolation) -> f64 {
    match mode {
        Interpolation::Nearest => data[nearest_index(dims, p)].into(),
        Interpolation::Trilinear => {
            let (x0, x1, fx) = cell(dims[0], p[0]);
            let (y0, y1, fy) = cell(dims[1], p[1]);
            let (z0, z1, fz) = cell(dims[2], p[2]);
            let at = |x: usize, y: usize, z: usize| -> f64 { data[x + dims[0] * (y + dims[1] * z)].into() };
            let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
            let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
            let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
            let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
            let c0 = c00 * (1.0 - fy) + c10 * fy;
            let c1 = c01 * (1.0 - fy) + c11 * fy;
            c0 * (1.0 - fz) + c1 * fz
        }
    }
}

/// Trilinear sample and its spatial derivative. The derivative along an
/// axis is zero where that coordinate is clamped to the grid edge.
pub fn sample_with_gradient(data: &[f32], dims: [usize; 3], p: Point3) -> (f64, [f64; 3]) {
    let (x0, x1, fx) = cell(dims[0], p[0]);
    let (y0, y1, fy) = cell(dims[1], p[1]);
    let (z0, z1, fz) = cell(dims[2], p[2]);
    let inside = |a: usize| dims[a] > 1 && p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64;
    let at = |x: usize, y: usize, z: usize| data[x + dims[0] * (y + dims[1] * z)] as f64;
    let v000 = at(x0, y0, z0);
    let v100 = at(x1, y0, z0);
    let v010 = at(x0, y1, z0);
    let v110 = at(x1, y1, z0);
    let v001 = at(x0, y0, z1);
    let v101 = at(x1, y0, z1);
    let v011 = at(x0, y1, z1);
    let v111 = at(x1, y1, z1);

    let c00 = v000 + (v100 - v000) * fx;
    let c10 = v010 + (v110 - v010) * fx;
    let c01 = v001 + (v101 - v001) * fx;
    let c11 = v011 + (v111 - v011) * fx;
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    let value = c0 + (c1 - c0) * fz;

    let mut grad = [0.0; 3];
    if inside(0) {
        let d00 = v100 - v000;
        let d10 = v110 - v010;
        let d01 = v101 - v001;
        let d11 = v111 - v011;
        let d0 = d00 + (d10 - d00) * fy;
        let d1 = d01 + (d11 - d01) * fy;
        grad[0] = d0 + (d1 - d0) * fz;
    }
    if inside(1) {
        grad[1] = (c10 - c00) + ((c11 - c01) - (c10 - c00)) * fz;
    }
    if inside(2) {
        grad[2] = c1 - c0;
    }
    (value, grad)
}

/// Normalized 1-D Gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Separable Gaussian smoothing with clamp-to-edge boundaries.
pub fn gaussian_smooth_in_place(data: &mut [f32], dims: [usize; 3], sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let kernel = gaussian_kernel(sigma);
    for axis in 0..3 {
        convolve_axis(data, dims, axis, &kernel);
    }
    Ok(())
}

fn convolve_axis(data: &mut [f32], dims: [usize; 3], axis: usize, kernel: &[f64]) {
    let n = dims[axis];
    let radius = (kernel.len() / 2) as i64;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    // One line per (other two coordinates); lines are gathered so the
    // convolution can run in parallel without aliasing.
    let line_starts: Vec<usize> = (0..dims[0] * dims[1] * dims[2])
        .filter(|&i| {
            let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            c[axis] == 0
        })
        .collect();
    let src: &[f32] = data;
    let lines: Vec<Vec<f32>> = line_starts
        .par_iter()
        .map(|&start| {
            let line: Vec<f64> = (0..n).map(|k| src[start + k * stride] as f64).collect();
            (0..n as i64)
                .map(|k| {
                    let mut acc = 0.0;
                    for (j, w) in kernel.iter().enumerate() {
                        let idx = (k + j as i64 - radius).clamp(0, n as i64 - 1) as usize;
                        acc += w * line[idx];
                    }
                    acc as f32
                })
                .collect()
        })
        .collect();
    for (start, line) in line_starts.iter().zip(lines) {
        for (k, v) in line.into_iter().enumerate() {
            data[start + k * stride] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3], f: impl Fn(f64, f64, f64) -> f64 + Sync) -> Volume {
        Volume::from_fn(Geometry::identity(dims), |[x, y, z]| f(x as f64, y as f64, z as f64) as f32)
    }

    #[test]
    fn sample_at_integer_index_is_exact() {
        let v = ramp([4, 5, 6], |x, y, z| x * 100.0 + y * 10.0 + z);
        assert_eq!(v.sample([2.0, 3.0, 4.0], Interpolation::Trilinear), 234.0);
        assert_eq!(v.sample([2.0, 3.0, 4.0], Interpolation::Nearest), 234.0);
    }

    #[test]
    fn midpoint_interpolates_linearly() {
        let mut data = vec![0.0f32; 2];
        data[1] = 10.0;
        let v = Volume::new(Geometry::identity([2, 1, 1]), data).unwrap();
        assert_eq!(v.sample([0.5, 0.0, 0.0], Interpolation::Trilinear), 5.0);
    }

    #[test]
    fn ramp_sample_matches_analytic_value() {
        let v = ramp([8, 3, 3], |x, _, _| x);
        assert!((v.sample([2.25, 1.0, 1.0], Interpolation::Trilinear) - 2.25).abs() < 1e-6);
    }

    #[test]
    fn nearest_rounds_half_away_from_zero() {
        let v = ramp([8, 1, 1], |x, _, _| x);
        assert_eq!(v.sample([2.5, 0.0, 0.0], Interpolation::Nearest), 3.0);
        assert_eq!(v.sample([2.49, 0.0, 0.0], Interpolation::Nearest), 2.0);
    }

    #[test]
    fn out_of_bounds_clamps_to_edge() {
        let v = ramp([4, 4, 4], |x, y, _| x + y);
        assert_eq!(v.sample([-3.0, 0.0, 0.0], Interpolation::Trilinear), 0.0);
        assert_eq!(v.sample([10.0, 3.0, 1.0], Interpolation::Trilinear), 6.0);
        assert_eq!(v.sample([10.0, 3.0, 1.0], Interpolation::Nearest), 6.0);
    }

    #[test]
    fn gradient_matches_finite_difference_inside_cells() {
        let v = ramp([6, 6, 6], |x, y, z| (x * 0.7).sin() + y * y * 0.1 - x * z * 0.2);
        let p = [2.3, 1.6, 3.45];
        let (val, g) = sample_with_gradient(v.data(), v.geometry().dims(), p);
        assert!((val - v.sample(p, Interpolation::Trilinear) as f64).abs() < 1e-5);
        let h = 1e-4;
        for a in 0..3 {
            let mut lo = p;
            let mut hi = p;
            lo[a] -= h;
            hi[a] += h;
            let fd = (sample(v.data(), [6, 6, 6], hi, Interpolation::Trilinear)
                - sample(v.data(), [6, 6, 6], lo, Interpolation::Trilinear))
                / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", g[a]);
        }
    }

    #[test]
    fn smoothing_sigma_zero_is_identity() {
        let v = ramp([5, 4, 3], |x, y, z| x * y - z);
        assert_eq!(v.gaussian_smooth(0.0).unwrap(), v);
    }

    #[test]
    fn smoothing_keeps_constant_volume() {
        let v = Volume::filled(Geometry::identity([7, 6, 5]), 3.25);
        let s = v.gaussian_smooth(1.7).unwrap();
        assert!(s.data().iter().all(|&x| (x - 3.25).abs() < 1e-6));
    }

    #[test]
    fn smoothing_impulse_centre_weight() {
        let dims = [9, 9, 9];
        let g = Geometry::identity(dims);
        let mut data = vec![0.0f32; g.len()];
        data[g.index(4, 4, 4)] = 1.0;
        let v = Volume::new(g, data).unwrap();
        let s = v.gaussian_smooth(0.8).unwrap();
        // Independent kernel evaluation: radius ceil(2.4) = 3.
        let w: Vec<f64> = (-3i32..=3).map(|i| (-(i * i) as f64 / (2.0 * 0.64)).exp()).collect();
        let w0 = 1.0 / w.iter().sum::<f64>();
        assert!((s.get(4, 4, 4) as f64 - w0.powi(3)).abs() < 1e-6);
    }

    #[test]
    fn negative_sigma_rejected() {
        let v = Volume::filled(Geometry::identity([2, 2, 2]), 1.0);
        assert!(v.gaussian_smooth(-0.1).is_err());
    }

    #[test]
    fn singular_affine_rejected() {
        let mut m = Matrix4::identity();
        m[(2, 2)] = 0.0;
        assert!(matches!(Geometry::new([2, 2, 2], m), Err(Error::NonInvertibleAffine { .. })));
    }

    #[test]
    fn identity_resample_is_bit_identical() {
        let v = ramp([5, 6, 7], |x, y, z| (x * 1.3 + y * 0.1).cos() * z);
        let r = v.resample_into(v.geometry(), |p| p, Interpolation::Trilinear);
        assert_eq!(r, v);
    }

    #[test]
    fn integer_translation_shifts_labels_with_zero_fill() {
        let g = Geometry::identity([6, 4, 4]);
        let data: Vec<u16> = (0..g.len()).map(|i| if g.coords(i)[0] == 1 { 22 } else { 0 }).collect();
        let lm = LabelMap::with_canonical_table(g.clone(), data).unwrap();
        // Output voxel x reads source voxel x - 2.
        let shifted = lm.resample_into(&g, |p| [p[0] - 2.0, p[1], p[2]]);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            let expected = if x >= 2 { lm.get(x - 2, y, z) } else { 0 };
            assert_eq!(shifted.data()[i], expected);
        }
        assert_eq!(shifted.count(22), 16);
    }

    #[test]
    fn downsampling_constant_volume_stays_constant() {
        let v = Volume::filled(Geometry::identity([8, 8, 8]), 7.0);
        let target = Geometry::with_spacing([4, 4, 4], [2.0, 2.0, 2.0]).unwrap();
        let r = v.resample_into(&target, |p| p, Interpolation::Trilinear);
        assert!(r.data().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn label_table_must_cover_labels() {
        let g = Geometry::identity([2, 1, 1]);
        assert!(LabelMap::new(g.clone(), vec![0, 24], BTreeMap::new()).is_err());
        assert!(LabelMap::with_canonical_table(g, vec![0, 999]).is_err());
    }
}
