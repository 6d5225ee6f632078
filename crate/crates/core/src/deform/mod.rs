//! Deformable refinement of an affinely aligned moving image onto the fixed
//! grid.
//!
//! The objective is `L(D) = S(F_f, warp(F_m; A, D)) + lambda * R(D)` where
//! `F` are six-channel self-similarity descriptors, `S` is their mean squared
//! difference and `R` the mean gradient magnitude of the control-grid
//! displacement `D`. Moving descriptors are computed once in moving space and
//! pulled back through `x -> A^-1(world(x + D(x)))` at every iteration. `D`
//! is optimized with ADAM under the piecewise-decay learning-rate schedule.

mod adam;
mod field;
mod mind;
mod schedule;

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::OptimizerState;
pub use field::{DisplacementField, FieldMetadata};
pub use mind::{mind_descriptors, DescriptorField, MindParams, CHANNELS, OFFSETS};
pub use schedule::{pwd_learning_rate, SCHEDULE_LAST_STEP};

use crate::error::{Error, Result};
use crate::similarity::SimilarityTransform;
use crate::volume::{sample, sample_with_gradient, transform_point, Geometry, Interpolation, LabelMap, Point3, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub iterations: usize,
    /// Weight of the smoothness term.
    pub lambda: f64,
    /// Control-node spacing in fixed voxels.
    pub stride: usize,
    pub mind: MindParams,
    /// Smoothing of the gradient magnitude near zero.
    pub eps_r: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            iterations: SCHEDULE_LAST_STEP,
            lambda: 0.02,
            stride: 4,
            mind: MindParams::default(),
            eps_r: 1.0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.iterations > SCHEDULE_LAST_STEP {
            return Err(Error::InvalidArgument(format!(
                "iterations must be in 1..={SCHEDULE_LAST_STEP}, got {}",
                self.iterations
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if !(self.eps_r > 0.0) {
            return Err(Error::InvalidArgument("eps_r must be positive".into()));
        }
        Ok(())
    }

    /// Schedule position for loop iteration `s`; identical to `s` for the
    /// full 250-iteration run, proportionally compressed for shorter runs.
    pub fn schedule_step(&self, s: usize) -> usize {
        s * SCHEDULE_LAST_STEP / self.iterations
    }
}

/// Affine map from fixed voxel coordinates (after displacement) to moving
/// voxel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct PullBack {
    linear: Matrix3<f64>,
    offset: Vector3<f64>,
}

impl PullBack {
    pub fn new(fixed: &Geometry, moving: &Geometry, affine: &SimilarityTransform) -> Self {
        let m: Matrix4<f64> = moving.world_to_index() * affine.inverse().to_matrix() * fixed.index_to_world();
        PullBack {
            linear: m.fixed_view::<3, 3>(0, 0).into_owned(),
            offset: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    #[inline]
    pub fn apply(&self, q: [f64; 3]) -> Point3 {
        let v = self.linear * Vector3::from(q) + self.offset;
        [v.x, v.y, v.z]
    }
}

/// Mean squared channel difference over all voxels and channels.
pub fn similarity_s(fixed: &DescriptorField, warped: &DescriptorField) -> Result<f64> {
    fixed.geometry().ensure_matches(warped.geometry(), "similarity_s")?;
    let n = fixed.geometry().len() * CHANNELS;
    let sum: f64 = (0..CHANNELS)
        .map(|c| {
            fixed
                .channel(c)
                .iter()
                .zip(warped.channel(c))
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(sum / n as f64)
}

fn check_field(fixed: &Geometry, field: &DisplacementField) -> Result<()> {
    if field.fixed_dims() != fixed.dims() {
        return Err(Error::GeometryMismatch(format!(
            "displacement field built for {:?}, fixed grid is {:?}",
            field.fixed_dims(),
            fixed.dims()
        )));
    }
    Ok(())
}

fn displaced(x: usize, y: usize, z: usize, d: [f64; 3]) -> [f64; 3] {
    [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]
}

/// Pull-back warp of a moving-space volume onto the fixed grid.
pub fn warp_volume(
    moving: &Volume,
    fixed: &Geometry,
    affine: &SimilarityTransform,
    field: &DisplacementField,
    mode: Interpolation,
) -> Result<Volume> {
    check_field(fixed, field)?;
    let map = PullBack::new(fixed, moving.geometry(), affine);
    let dense = field.upsample();
    let dims = moving.geometry().dims();
    let data = (0..fixed.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = fixed.coords(i);
            sample(moving.data(), dims, map.apply(displaced(x, y, z, dense[i])), mode) as f32
        })
        .collect();
    Volume::new(fixed.clone(), data)
}

/// Pull-back warp of a moving-space label map with nearest sampling.
pub fn warp_labels(
    moving: &LabelMap,
    fixed: &Geometry,
    affine: &SimilarityTransform,
    field: &DisplacementField,
) -> Result<LabelMap> {
    check_field(fixed, field)?;
    let map = PullBack::new(fixed, moving.geometry(), affine);
    let dense = field.upsample();
    let dims = moving.geometry().dims();
    let data = (0..fixed.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = fixed.coords(i);
            sample(moving.data(), dims, map.apply(displaced(x, y, z, dense[i])), Interpolation::Nearest) as u16
        })
        .collect();
    LabelMap::new(fixed.clone(), data, moving.label_table().clone())
}

/// Pull-back warp of moving descriptors; channels are sampled independently.
pub fn warp_descriptors(
    moving: &DescriptorField,
    fixed: &Geometry,
    affine: &SimilarityTransform,
    field: &DisplacementField,
) -> Result<DescriptorField> {
    check_field(fixed, field)?;
    let map = PullBack::new(fixed, moving.geometry(), affine);
    let dense = field.upsample();
    let dims = moving.geometry().dims();
    let channels = std::array::from_fn(|c| {
        let src = moving.channel(c);
        (0..fixed.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = fixed.coords(i);
                sample(src, dims, map.apply(displaced(x, y, z, dense[i])), Interpolation::Trilinear) as f32
            })
            .collect()
    });
    DescriptorField::new(fixed.clone(), channels)
}

/// Fixed-space world point to the moving-space world point the warp samples.
pub fn total_transform_point(
    affine: &SimilarityTransform,
    field: &DisplacementField,
    fixed: &Geometry,
    p_fixed: Point3,
) -> Result<Point3> {
    check_field(fixed, field)?;
    let v = fixed.world_to_voxel(p_fixed);
    const TOL: f64 = 1e-9;
    let dims = fixed.dims();
    if (0..3).any(|a| v[a] < -TOL || v[a] > (dims[a] - 1) as f64 + TOL) {
        return Err(Error::OutsideDomain(p_fixed));
    }
    let d = field.at_voxel(v);
    let q = [v[0] + d[0], v[1] + d[1], v[2] + d[2]];
    Ok(affine.apply_inverse(transform_point(fixed.index_to_world(), q)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub similarity: f64,
    pub regularizer: f64,
    pub loss: f64,
}

/// Precomputed descriptors and geometry for evaluating `L` and `dL/dD`.
pub struct Objective {
    fixed_geometry: Geometry,
    fixed_desc: DescriptorField,
    moving_desc: DescriptorField,
    map: PullBack,
    lambda: f64,
    eps_r: f64,
    stride: usize,
}

impl Objective {
    pub fn new(fixed: &Volume, moving: &Volume, affine: &SimilarityTransform, cfg: &RegConfig) -> Result<Self> {
        cfg.validate()?;
        let fixed_desc = mind_descriptors(fixed, &cfg.mind)?;
        let moving_desc = mind_descriptors(moving, &cfg.mind)?;
        Ok(Self::from_descriptors(fixed_desc, moving_desc, affine, cfg))
    }

    pub fn from_descriptors(
        fixed_desc: DescriptorField,
        moving_desc: DescriptorField,
        affine: &SimilarityTransform,
        cfg: &RegConfig,
    ) -> Self {
        let fixed_geometry = fixed_desc.geometry().clone();
        let map = PullBack::new(&fixed_geometry, moving_desc.geometry(), affine);
        Objective {
            fixed_geometry,
            fixed_desc,
            moving_desc,
            map,
            lambda: cfg.lambda,
            eps_r: cfg.eps_r,
            stride: cfg.stride,
        }
    }

    pub fn zero_field(&self) -> DisplacementField {
        DisplacementField::zeros(self.fixed_geometry.dims(), self.stride).expect("stride validated")
    }

    pub fn fixed_descriptors(&self) -> &DescriptorField {
        &self.fixed_desc
    }

    pub fn evaluate(&self, field: &DisplacementField) -> LossTerms {
        self.run(field, false).0
    }

    /// Loss terms and the gradient of `L` with respect to every control-node
    /// displacement component.
    pub fn evaluate_with_gradient(&self, field: &DisplacementField) -> (LossTerms, Vec<[f64; 3]>) {
        let (terms, grad) = self.run(field, true);
        (terms, grad.expect("gradient requested"))
    }

    fn run(&self, field: &DisplacementField, want_grad: bool) -> (LossTerms, Option<Vec<[f64; 3]>>) {
        let g = &self.fixed_geometry;
        let [nx, ny, nz] = g.dims();
        let mdims = self.moving_desc.geometry().dims();
        let dense = field.upsample();
        let norm = 1.0 / (g.len() * CHANNELS) as f64;
        let jac = self.map.linear;

        // One task per z-slice; partial sums are reduced in slice order so
        // the result does not depend on the thread count.
        let slices: Vec<(f64, Vec<[f64; 3]>)> = (0..nz)
            .into_par_iter()
            .map(|z| {
                let mut sum = 0.0;
                let mut grad = if want_grad { vec![[0.0; 3]; nx * ny] } else { Vec::new() };
                for y in 0..ny {
                    for x in 0..nx {
                        let i = x + nx * (y + ny * z);
                        let p = self.map.apply(displaced(x, y, z, dense[i]));
                        let mut gp = [0.0; 3];
                        for c in 0..CHANNELS {
                            let ff = self.fixed_desc.channel(c)[i] as f64;
                            if want_grad {
                                let (fm, dfm) = sample_with_gradient(self.moving_desc.channel(c), mdims, p);
                                let r = fm - ff;
                                sum += r * r;
                                for a in 0..3 {
                                    gp[a] += 2.0 * r * dfm[a];
                                }
                            } else {
                                let fm = sample(self.moving_desc.channel(c), mdims, p, Interpolation::Trilinear);
                                sum += (fm - ff) * (fm - ff);
                            }
                        }
                        if want_grad {
                            // dp/dD = jac, so dS/dD = jac^T * dS/dp.
                            let out = &mut grad[x + nx * y];
                            for (b, o) in out.iter_mut().enumerate() {
                                *o = norm * (jac[(0, b)] * gp[0] + jac[(1, b)] * gp[1] + jac[(2, b)] * gp[2]);
                            }
                        }
                    }
                }
                (sum, grad)
            })
            .collect();

        let mut s_sum = 0.0;
        let mut dense_grad = if want_grad { Vec::with_capacity(g.len()) } else { Vec::new() };
        for (s, gslice) in slices {
            s_sum += s;
            dense_grad.extend(gslice);
        }
        let similarity = s_sum * norm;
        let (regularizer, r_grad) = field.regularizer_with_grad(self.eps_r);
        let terms = LossTerms {
            similarity,
            regularizer,
            loss: similarity + self.lambda * regularizer,
        };
        if !want_grad {
            return (terms, None);
        }
        let mut node_grad = field.adjoint(&dense_grad);
        for (ng, rg) in node_grad.iter_mut().zip(&r_grad) {
            for c in 0..3 {
                ng[c] += self.lambda * rg[c];
            }
        }
        (terms, Some(node_grad))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub s: usize,
    pub eta: f64,
    #[serde(rename = "S")]
    pub similarity: f64,
    #[serde(rename = "R")]
    pub regularizer: f64,
    #[serde(rename = "L")]
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub field: DisplacementField,
    pub trace: Vec<TraceRow>,
}

pub fn register_deformable(
    fixed: &Volume,
    moving: &Volume,
    affine: &SimilarityTransform,
    cfg: &RegConfig,
) -> Result<Registration> {
    register_deformable_cancellable(fixed, moving, affine, cfg, &AtomicBool::new(false))
}

/// As [`register_deformable`], checking `cancel` before every iteration.
pub fn register_deformable_cancellable(
    fixed: &Volume,
    moving: &Volume,
    affine: &SimilarityTransform,
    cfg: &RegConfig,
    cancel: &AtomicBool,
) -> Result<Registration> {
    let objective = Objective::new(fixed, moving, affine, cfg)?;
    optimize(&objective, cfg, cancel)
}

pub fn optimize(objective: &Objective, cfg: &RegConfig, cancel: &AtomicBool) -> Result<Registration> {
    cfg.validate()?;
    let mut field = objective.zero_field();
    let mut state = OptimizerState::new(field.nodes().len() * 3);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for s in 0..cfg.iterations {
        if cancel.load(Ordering::Relaxed) {
            return Err(Error::Cancelled);
        }
        let eta = pwd_learning_rate(cfg.schedule_step(s))?;
        let (terms, grad) = objective.evaluate_with_gradient(&field);
        trace.push(TraceRow {
            s,
            eta,
            similarity: terms.similarity,
            regularizer: terms.regularizer,
            loss: terms.loss,
        });
        if !terms.loss.is_finite() {
            return Err(Error::RegistrationAborted {
                iteration: s,
                reason: format!("non-finite loss {}", terms.loss),
                trace,
            });
        }
        let flat: Vec<f64> = grad.iter().flatten().copied().collect();
        let update = state.adam_step(&flat, eta).map_err(|e| Error::RegistrationAborted {
            iteration: s,
            reason: e.to_string(),
            trace: trace.clone(),
        })?;
        for (node, u) in field.nodes_mut().iter_mut().zip(update.chunks_exact(3)) {
            node[0] += u[0];
            node[1] += u[1];
            node[2] += u[2];
        }
    }
    Ok(Registration { field, trace })
}

pub fn write_trace_csv(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("s,eta,S,R,L\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{},{}\n", r.s, r.eta, r.similarity, r.regularizer, r.loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes the dense field as a 3-channel NIfTI (voxel units) plus
/// `<stem>.json` metadata.
pub fn save_field(
    field: &DisplacementField,
    fixed: &Geometry,
    cfg: &RegConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    check_field(fixed, field)?;
    crate::nifti_io::save_vector_field(fixed, &field.dense_components(), path)?;
    let meta = FieldMetadata {
        stride: field.stride(),
        lambda: cfg.lambda,
        iterations: cfg.iterations,
        grid_dims: field.grid_dims(),
        units: "voxel".into(),
    };
    let meta_path = crate::nifti_io::sidecar_path(path);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    save_field_nodes(field, &meta_path.with_extension("nodes.json"))
}

#[derive(Serialize, Deserialize)]
struct NodeDump {
    fixed_dims: [usize; 3],
    stride: usize,
    nodes: Vec<[f64; 3]>,
}

fn save_field_nodes(field: &DisplacementField, path: &Path) -> Result<()> {
    let dump = NodeDump {
        fixed_dims: field.fixed_dims(),
        stride: field.stride(),
        nodes: field.nodes().to_vec(),
    };
    std::fs::write(path, serde_json::to_string(&dump)?).map_err(|e| Error::io(path, e))
}

/// Reloads the control-grid field written by [`save_field`]. The dense
/// NIfTI is validated for finiteness and geometry.
pub fn load_field(path: impl AsRef<Path>) -> Result<(Geometry, DisplacementField)> {
    let path = path.as_ref();
    let (geometry, _dense) = crate::nifti_io::load_vector_field(path)?;
    let nodes_path = crate::nifti_io::sidecar_path(path).with_extension("nodes.json");
    let text = std::fs::read_to_string(&nodes_path).map_err(|e| Error::io(&nodes_path, e))?;
    let dump: NodeDump = serde_json::from_str(&text)?;
    if dump.fixed_dims != geometry.dims() {
        return Err(Error::GeometryMismatch("field nodes do not match field image".into()));
    }
    let field = DisplacementField::from_nodes(dump.fixed_dims, dump.stride, dump.nodes)?;
    Ok((geometry, field))
}
