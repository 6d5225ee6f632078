//! Per-structure surface meshes, smoothing and glTF export.

mod gltf;
pub mod mc;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gltf::{export_gltf, write_glb};

use crate::error::{Error, Result};
use crate::structure::{StructureClass, StructureId};
use crate::volume::{Geometry, LabelMap, Point3};

pub type Rgba = [f32; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub classes: BTreeMap<String, Rgba>,
    #[serde(default)]
    pub structures: BTreeMap<String, Rgba>,
}

fn class_key(class: StructureClass) -> &'static str {
    match class {
        StructureClass::Vertebra => "vertebra",
        StructureClass::Sacrum => "sacrum",
        StructureClass::Disc => "disc",
        StructureClass::SpinalCord => "spinal_cord",
        StructureClass::Csf => "csf",
        StructureClass::NerveRoots => "nerve_roots",
        StructureClass::LigamentumFlavum => "ligamentum_flavum",
    }
}

impl Default for Palette {
    fn default() -> Self {
        serde_json::from_str(include_str!("../../assets/palette.json")).expect("bundled palette is valid")
    }
}

impl Palette {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn color(&self, id: StructureId) -> Rgba {
        if let Some(c) = self.structures.get(&id.to_string()) {
            return *c;
        }
        id.class()
            .and_then(|c| self.classes.get(class_key(c)))
            .copied()
            .unwrap_or([0.7, 0.7, 0.7, 1.0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub structure: StructureId,
    pub color: Rgba,
    /// World positions in mm.
    pub vertices: Vec<Point3>,
    /// Counter-clockwise seen from outside.
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Undirected edge -> number of incident triangles.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut m = HashMap::new();
        for t in &self.triangles {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn boundary_edges(&self) -> usize {
        self.edge_counts().values().filter(|&&c| c == 1).count()
    }

    /// Every edge shared by exactly two triangles, traversed once in each
    /// direction.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for i in 0..3 {
                *directed.entry((t[i], t[(i + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed.iter().all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn euler_characteristic(&self) -> i64 {
        let used: std::collections::BTreeSet<u32> = self.triangles.iter().flatten().copied().collect();
        used.len() as i64 - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Signed enclosed volume (mm^3); positive for outward winding.
    pub fn enclosed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                    + a[2] * (b[0] * c[1] - b[1] * c[0]))
                    / 6.0
            })
            .sum()
    }

    /// Drops zero-area triangles and unreferenced vertices.
    pub fn cleanup(mut self) -> Self {
        let area2 = |t: &[u32; 3], v: &[Point3]| {
            let [a, b, c] = t.map(|i| v[i as usize]);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
            n[0] * n[0] + n[1] * n[1] + n[2] * n[2]
        };
        let verts = std::mem::take(&mut self.vertices);
        self.triangles.retain(|t| area2(t, &verts) > 1e-24);
        let mut remap = vec![u32::MAX; verts.len()];
        let mut kept = Vec::new();
        for t in &mut self.triangles {
            for i in t.iter_mut() {
                if remap[*i as usize] == u32::MAX {
                    remap[*i as usize] = kept.len() as u32;
                    kept.push(verts[*i as usize]);
                }
                *i = remap[*i as usize];
            }
        }
        self.vertices = kept;
        self
    }
}

fn part_to_world(part: mc::MeshPart, geometry: &Geometry, structure: StructureId, color: Rgba) -> TriangleMesh {
    TriangleMesh {
        structure,
        color,
        vertices: part.voxel_positions.iter().map(|&p| geometry.voxel_to_world(p)).collect(),
        triangles: part.triangles,
    }
}

/// Isosurface of `label`'s indicator; the grid is treated as surrounded by
/// background so border-touching masks still close.
pub fn marching_cubes(lm: &LabelMap, label: u16) -> TriangleMesh {
    let structure = StructureId::from_label(label).unwrap_or(StructureId::SPINAL_CORD);
    let color = Palette::default().color(structure);
    marching_cubes_with(lm, label, color)
}

fn marching_cubes_with(lm: &LabelMap, label: u16, color: Rgba) -> TriangleMesh {
    let dims = lm.geometry().dims();
    let data = lm.data();
    let hi = dims.map(|d| d as i64);
    let part = mc::extract_region(dims, |i| data[i] == label, [-1; 3], hi);
    let structure = StructureId::from_label(label).unwrap_or(StructureId::SPINAL_CORD);
    part_to_world(part, lm.geometry(), structure, color).cleanup()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothParams {
    pub iterations: usize,
    pub step: f64,
}

impl Default for SmoothParams {
    fn default() -> Self {
        SmoothParams { iterations: 10, step: 0.5 }
    }
}

/// Uniform-weight Laplacian smoothing. Boundary vertices stay fixed; meshes
/// with an edge used by more than two triangles are returned unchanged.
pub fn smooth(mesh: &TriangleMesh, params: SmoothParams) -> TriangleMesh {
    let mut out = mesh.clone();
    if params.iterations == 0 || mesh.is_empty() {
        return out;
    }
    let counts = mesh.edge_counts();
    if counts.values().any(|&c| c > 2) {
        warn!("mesh for {} is not manifold; smoothing skipped", mesh.structure);
        return out;
    }
    let n = mesh.vertices.len();
    let mut neighbours: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut fixed = vec![false; n];
    for (&(a, b), &c) in &counts {
        neighbours[a as usize].push(b);
        neighbours[b as usize].push(a);
        if c == 1 {
            fixed[a as usize] = true;
            fixed[b as usize] = true;
        }
    }
    for nb in &mut neighbours {
        nb.sort_unstable();
    }
    for _ in 0..params.iterations {
        let prev = out.vertices.clone();
        out.vertices.par_iter_mut().enumerate().for_each(|(i, v)| {
            if fixed[i] || neighbours[i].is_empty() {
                return;
            }
            let mut avg = [0.0; 3];
            for &j in &neighbours[i] {
                for a in 0..3 {
                    avg[a] += prev[j as usize][a];
                }
            }
            let k = neighbours[i].len() as f64;
            for a in 0..3 {
                v[a] = prev[i][a] + params.step * (avg[a] / k - prev[i][a]);
            }
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelScene {
    /// Sorted by structure.
    pub meshes: Vec<TriangleMesh>,
    pub geometry: Geometry,
    pub visibility: BTreeMap<StructureId, bool>,
}

impl ModelScene {
    pub fn mesh(&self, id: StructureId) -> Option<&TriangleMesh> {
        self.meshes.iter().find(|m| m.structure == id)
    }
}

/// One smoothed mesh per nonzero label present in `lm`.
pub fn build_scene(lm: &LabelMap, palette: &Palette, smoothing: SmoothParams) -> Result<ModelScene> {
    let labels = lm.present_labels();
    for &l in &labels {
        StructureId::from_label(l)?;
    }
    let meshes: Vec<TriangleMesh> = labels
        .par_iter()
        .map(|&l| {
            let id = StructureId::from_label(l).expect("checked above");
            smooth(&marching_cubes_with(lm, l, palette.color(id)), smoothing)
        })
        .collect();
    let visibility = meshes.iter().map(|m| (m.structure, true)).collect();
    Ok(ModelScene {
        meshes,
        geometry: lm.geometry().clone(),
        visibility,
    })
}
