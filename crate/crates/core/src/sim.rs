//! Headless decompression rehearsal: tools carve the working label grid,
//! per-chunk meshes are rebuilt only where voxels changed, and an exact
//! distance field to the protected (neural) structures drives the
//! proximity alarm.
//!
//! The distance field is built once: carving never removes protected
//! voxels, so it stays valid for the whole session.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::info;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edt::{distance_transform, DistanceField};
use crate::error::{Error, Result};
use crate::mesh::mc;
use crate::structure::StructureId;
use crate::volume::{sample, Interpolation, LabelMap, Point3};

pub const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Burr,
    Kerrison,
    Woodson,
    Rongeur,
}

impl ToolKind {
    pub fn carves(self) -> bool {
        matches!(self, ToolKind::Burr | ToolKind::Kerrison)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub kind: ToolKind,
    /// Burr sphere radius.
    #[serde(default = "default_radius")]
    pub radius_mm: f64,
    /// Kerrison bite: width across, depth along the direction, height.
    #[serde(default = "default_bite")]
    pub bite_mm: [f64; 3],
}

fn default_radius() -> f64 {
    2.0
}

fn default_bite() -> [f64; 3] {
    [3.0, 3.0, 2.0]
}

impl Tool {
    pub fn burr(radius_mm: f64) -> Self {
        Tool {
            kind: ToolKind::Burr,
            radius_mm,
            bite_mm: default_bite(),
        }
    }

    pub fn kerrison(width: f64, depth: f64, height: f64) -> Self {
        Tool {
            kind: ToolKind::Kerrison,
            radius_mm: default_radius(),
            bite_mm: [width, depth, height],
        }
    }

    pub fn probe(kind: ToolKind) -> Self {
        Tool {
            kind,
            radius_mm: default_radius(),
            bite_mm: default_bite(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ToolKind::Burr => self.radius_mm > 0.0 && self.radius_mm.is_finite(),
            ToolKind::Kerrison => self.bite_mm.iter().all(|v| *v > 0.0 && v.is_finite()),
            _ => true,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("tool dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarveCommand {
    pub seq: u64,
    pub tool: Tool,
    pub tip: Point3,
    pub direction: Point3,
    #[serde(default = "yes")]
    pub active: bool,
}

fn yes() -> bool {
    true
}

/// Orthonormal frame with `d` as the third axis; the first axis is chosen
/// from the world axis least aligned with `d`.
fn frame(d: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = d.iter().map(|v| v.abs()).enumerate().fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc }).0;
    let mut e = Vector3::zeros();
    e[a] = 1.0;
    let u = d.cross(&e).normalize();
    let v = d.cross(&u);
    (u, v)
}

/// Voxel-centre inclusion test for one tool pose.
#[derive(Clone, Copy, Debug)]
pub enum Footprint {
    Sphere { center: Vector3<f64>, radius: f64 },
    Box { tip: Vector3<f64>, d: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, size: [f64; 3] },
}

impl Footprint {
    pub fn of(cmd: &CarveCommand) -> Option<Footprint> {
        let tip = Vector3::from(cmd.tip);
        match cmd.tool.kind {
            ToolKind::Burr => Some(Footprint::Sphere {
                center: tip,
                radius: cmd.tool.radius_mm,
            }),
            ToolKind::Kerrison => {
                let d = Vector3::from(cmd.direction);
                let (u, v) = frame(d);
                Some(Footprint::Box {
                    tip,
                    d,
                    u,
                    v,
                    size: cmd.tool.bite_mm,
                })
            }
            _ => None,
        }
    }

    pub fn contains(&self, p: Point3) -> bool {
        let p = Vector3::from(p);
        match *self {
            Footprint::Sphere { center, radius } => (p - center).norm_squared() <= radius * radius,
            Footprint::Box { tip, d, u, v, size } => {
                let r = p - tip;
                let along = r.dot(&d);
                along >= 0.0 && along <= size[1] && r.dot(&u).abs() <= size[0] / 2.0 && r.dot(&v).abs() <= size[2] / 2.0
            }
        }
    }

    /// World-space corners of a box enclosing the footprint.
    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Footprint::Sphere { center, radius } => (center.add_scalar(-radius), center.add_scalar(radius)),
            Footprint::Box { tip, d, u, v, size } => {
                let mut lo = Vector3::repeat(f64::INFINITY);
                let mut hi = Vector3::repeat(f64::NEG_INFINITY);
                for a in [0.0, size[1]] {
                    for b in [-0.5, 0.5] {
                        for c in [-0.5, 0.5] {
                            let p = tip + d * a + u * (b * size[0]) + v * (c * size[2]);
                            lo = lo.inf(&p);
                            hi = hi.sup(&p);
                        }
                    }
                }
                (lo, hi)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmLevel {
    None,
    Warn,
    Danger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmState {
    pub level: AlarmLevel,
    /// `None` (serialized as null) when the tip is outside the volume.
    pub distance_mm: Option<f64>,
    pub structure: Option<String>,
}

impl AlarmState {
    pub fn distance(&self) -> f64 {
        self.distance_mm.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub protected: BTreeSet<StructureId>,
    pub warn_mm: f64,
    pub danger_mm: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            protected: [StructureId::SPINAL_CORD, StructureId::NERVE_ROOTS, StructureId::CSF].into(),
            warn_mm: 3.0,
            danger_mm: 1.0,
        }
    }
}

/// Mesh of one structure inside one chunk; vertices carry global lattice
/// edge keys so chunk pieces weld without duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructurePatch {
    pub label: u16,
    pub keys: Vec<u64>,
    pub positions: Vec<[f32; 3]>,
    pub indices: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkMesh {
    pub chunk: [usize; 3],
    pub structures: Vec<StructurePatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarveResult {
    pub seq: u64,
    /// False for inactive commands and probe tools.
    pub applied: bool,
    /// Removed voxel counts by structure name.
    pub removed: BTreeMap<String, u64>,
    pub dirty_chunks: Vec<ChunkMesh>,
    pub alarm: AlarmState,
    pub violation: bool,
}

impl CarveResult {
    pub fn removed_total(&self) -> u64 {
        self.removed.values().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    /// Axial (world z) span in mm.
    pub axial_mm: [f64; 2],
    /// Lateral (world x) span in mm.
    pub lateral_mm: [f64; 2],
    /// Content anterior of this world y (mm) lies outside the posterior
    /// access corridor.
    pub anterior_limit_mm: f64,
    pub levels: Vec<StructureId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisibilityConfig {
    pub structures: BTreeMap<String, bool>,
    /// Non-structure content (the surrounding body) by region.
    pub regions: BTreeMap<String, bool>,
    pub corridor: Option<Corridor>,
    pub isolated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompressionReport {
    pub removed_mm3: BTreeMap<String, f64>,
    pub removed_voxels: BTreeMap<String, u64>,
    pub violation_count: u64,
    pub carve_count: u64,
}

#[derive(Clone, Debug)]
struct CarveDiff {
    /// (voxel, previous label)
    changes: Vec<(u32, u16)>,
    violation: bool,
}

pub struct SimSession {
    grid: LabelMap,
    config: SessionConfig,
    protected_labels: BTreeSet<u16>,
    sdf: DistanceField,
    chunk_dims: [usize; 3],
    chunks: Vec<ChunkMesh>,
    undo: Vec<CarveDiff>,
    ledger: BTreeMap<u16, u64>,
    carve_count: u64,
    violation_count: u64,
    last_seq: Option<u64>,
    tool: Tool,
    visibility: VisibilityConfig,
    saved_visibility: Option<VisibilityConfig>,
    last_alarm: AlarmLevel,
}

fn structure_name(lm: &LabelMap, label: u16) -> String {
    lm.label_table().get(&label).cloned().unwrap_or_else(|| label.to_string())
}

impl SimSession {
    pub fn new(model: &LabelMap, config: SessionConfig) -> Result<Self> {
        if !(config.danger_mm >= 0.0 && config.warn_mm >= config.danger_mm) {
            return Err(Error::InvalidArgument("alarm thresholds must satisfy 0 <= danger <= warn".into()));
        }
        let protected_labels: BTreeSet<u16> = config.protected.iter().map(|s| s.label()).collect();
        let present = model.present_labels();
        if !present.iter().any(|l| protected_labels.contains(l)) {
            return Err(Error::NoProtectedStructures);
        }
        if !present.iter().any(|l| !protected_labels.contains(l)) {
            return Err(Error::InvalidArgument("model has no carvable structure".into()));
        }
        let data = model.data();
        let sdf = distance_transform(model.geometry(), |i| protected_labels.contains(&data[i]));
        let dims = model.geometry().dims();
        let chunk_dims = dims.map(|d| d.div_ceil(CHUNK));
        let mut s = SimSession {
            grid: model.clone(),
            config,
            protected_labels,
            sdf,
            chunk_dims,
            chunks: Vec::new(),
            undo: Vec::new(),
            ledger: BTreeMap::new(),
            carve_count: 0,
            violation_count: 0,
            last_seq: None,
            tool: Tool::burr(default_radius()),
            visibility: VisibilityConfig::default(),
            saved_visibility: None,
            last_alarm: AlarmLevel::None,
        };
        s.visibility = s.default_visibility();
        let n = chunk_dims.iter().product();
        s.chunks = (0..n).map(|i| s.mesh_chunk(s.chunk_coords(i))).collect();
        info!("session created: {} chunks, {} protected voxels", n, s.protected_voxel_count());
        Ok(s)
    }

    pub fn grid(&self) -> &LabelMap {
        &self.grid
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn distance_field(&self) -> &[f64] {
        &self.sdf.distance
    }

    pub fn chunk_dims(&self) -> [usize; 3] {
        self.chunk_dims
    }

    pub fn chunks(&self) -> &[ChunkMesh] {
        &self.chunks
    }

    pub fn tool(&self) -> Tool {
        self.tool
    }

    pub fn select_tool(&mut self, tool: Tool) -> Result<()> {
        tool.validate()?;
        self.tool = tool;
        Ok(())
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }

    pub fn ledger(&self) -> &BTreeMap<u16, u64> {
        &self.ledger
    }

    pub fn protected_voxel_count(&self) -> usize {
        self.grid.data().iter().filter(|l| self.protected_labels.contains(l)).count()
    }

    pub fn is_protected(&self, label: u16) -> bool {
        self.protected_labels.contains(&label)
    }

    fn chunk_coords(&self, i: usize) -> [usize; 3] {
        let [cx, cy, _] = self.chunk_dims;
        [i % cx, (i / cx) % cy, i / (cx * cy)]
    }

    fn chunk_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.chunk_dims[0] * (c[1] + self.chunk_dims[1] * c[2])
    }

    /// Cubes owned by a chunk: `16k..16k+15` per axis, plus the padding
    /// cube `-1` for the first chunk.
    fn chunk_cube_range(&self, c: [usize; 3]) -> ([i64; 3], [i64; 3]) {
        let dims = self.grid.geometry().dims();
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for a in 0..3 {
            lo[a] = if c[a] == 0 { -1 } else { (c[a] * CHUNK) as i64 };
            hi[a] = ((c[a] + 1) * CHUNK).min(dims[a]) as i64;
        }
        (lo, hi)
    }

    /// Fresh marching cubes of one chunk's cubes for every label present.
    pub fn mesh_chunk(&self, c: [usize; 3]) -> ChunkMesh {
        let g = self.grid.geometry();
        let dims = g.dims();
        let data = self.grid.data();
        let (lo, hi) = self.chunk_cube_range(c);
        let mut labels = BTreeSet::new();
        for z in lo[2].max(0)..(hi[2] + 1).min(dims[2] as i64) {
            for y in lo[1].max(0)..(hi[1] + 1).min(dims[1] as i64) {
                for x in lo[0].max(0)..(hi[0] + 1).min(dims[0] as i64) {
                    let l = data[g.index(x as usize, y as usize, z as usize)];
                    if l != 0 {
                        labels.insert(l);
                    }
                }
            }
        }
        let structures = labels
            .into_iter()
            .filter_map(|l| {
                let part = mc::extract_region(dims, |i| data[i] == l, lo, hi);
                if part.triangles.is_empty() {
                    return None;
                }
                Some(StructurePatch {
                    label: l,
                    keys: part.keys,
                    positions: part
                        .voxel_positions
                        .iter()
                        .map(|&p| g.voxel_to_world(p).map(|v| v as f32))
                        .collect(),
                    indices: part.triangles.into_iter().flatten().collect(),
                })
            })
            .collect();
        ChunkMesh { chunk: c, structures }
    }

    /// Chunks whose cubes have voxel `v` as a corner.
    fn chunks_touching(&self, v: [usize; 3], out: &mut BTreeSet<usize>) {
        let dims = self.grid.geometry().dims();
        let owner = |cube: i64, a: usize| -> Option<usize> {
            if cube < -1 || cube >= dims[a] as i64 {
                None
            } else {
                Some((cube.max(0) as usize) / CHUNK)
            }
        };
        let mut per_axis: [Vec<usize>; 3] = Default::default();
        for a in 0..3 {
            for cube in [v[a] as i64 - 1, v[a] as i64] {
                if let Some(k) = owner(cube, a) {
                    if !per_axis[a].contains(&k) {
                        per_axis[a].push(k);
                    }
                }
            }
        }
        for &x in &per_axis[0] {
            for &y in &per_axis[1] {
                for &z in &per_axis[2] {
                    out.insert(self.chunk_index([x, y, z]));
                }
            }
        }
    }

    fn remesh(&mut self, changed: &[(u32, u16)]) -> Vec<ChunkMesh> {
        let g = self.grid.geometry().clone();
        let mut dirty = BTreeSet::new();
        for &(i, _) in changed {
            self.chunks_touching(g.coords(i as usize), &mut dirty);
        }
        dirty
            .into_iter()
            .map(|ci| {
                let m = self.mesh_chunk(self.chunk_coords(ci));
                self.chunks[ci] = m.clone();
                m
            })
            .collect()
    }

    /// Alarm state for a tool tip in world mm.
    pub fn proximity(&self, tip: Point3) -> AlarmState {
        let g = self.grid.geometry();
        let dims = g.dims();
        let v = g.world_to_voxel(tip);
        let inside = tip.iter().all(|x| x.is_finite()) && (0..3).all(|a| v[a] >= 0.0 && v[a] <= (dims[a] - 1) as f64);
        if !inside {
            return AlarmState {
                level: AlarmLevel::None,
                distance_mm: None,
                structure: None,
            };
        }
        let d = sample(&self.sdf.distance, dims, v, Interpolation::Trilinear);
        let near = g.index(
            v[0].round() as usize,
            v[1].round() as usize,
            v[2].round() as usize,
        );
        let site = self.sdf.nearest[near];
        let structure = (site != u32::MAX).then(|| structure_name(&self.grid, self.grid.data()[site as usize]));
        let level = if d <= self.config.danger_mm {
            AlarmLevel::Danger
        } else if d <= self.config.warn_mm {
            AlarmLevel::Warn
        } else {
            AlarmLevel::None
        };
        AlarmState {
            level,
            distance_mm: Some(d),
            structure,
        }
    }

    /// Records `state` as current and reports whether the level changed.
    pub fn note_alarm(&mut self, state: &AlarmState) -> bool {
        let changed = state.level != self.last_alarm;
        self.last_alarm = state.level;
        changed
    }

    pub fn apply_carve(&mut self, cmd: &CarveCommand) -> Result<CarveResult> {
        if let Some(last) = self.last_seq {
            if cmd.seq <= last {
                return Err(Error::InvalidArgument(format!("seq {} not after {}", cmd.seq, last)));
            }
        }
        let dn = Vector3::from(cmd.direction).norm();
        if !((dn - 1.0).abs() <= 1e-6) || cmd.tip.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("direction must be a unit vector (|d| = {dn})")));
        }
        cmd.tool.validate()?;
        self.last_seq = Some(cmd.seq);
        let alarm = self.proximity(cmd.tip);
        let footprint = match (cmd.active, Footprint::of(cmd)) {
            (true, Some(f)) => f,
            _ => {
                return Ok(CarveResult {
                    seq: cmd.seq,
                    applied: false,
                    removed: BTreeMap::new(),
                    dirty_chunks: Vec::new(),
                    alarm,
                    violation: false,
                })
            }
        };
        let changes = self.carve_footprint(&footprint);
        let violation = changes.1;
        let mut removed: BTreeMap<u16, u64> = BTreeMap::new();
        for &(_, old) in &changes.0 {
            *removed.entry(old).or_insert(0) += 1;
        }
        for (&l, &n) in &removed {
            *self.ledger.entry(l).or_insert(0) += n;
        }
        self.carve_count += 1;
        self.violation_count += violation as u64;
        let dirty_chunks = self.remesh(&changes.0);
        self.undo.push(CarveDiff {
            changes: changes.0,
            violation,
        });
        Ok(CarveResult {
            seq: cmd.seq,
            applied: true,
            removed: removed.into_iter().map(|(l, n)| (structure_name(&self.grid, l), n)).collect(),
            dirty_chunks,
            alarm,
            violation,
        })
    }

    /// Voxels inside the footprint, in linear order.
    pub fn footprint_voxels(&self, footprint: &Footprint) -> Vec<usize> {
        let g = self.grid.geometry();
        let dims = g.dims();
        let (lo, hi) = footprint.bounds();
        let mut vlo = [f64::INFINITY; 3];
        let mut vhi = [f64::NEG_INFINITY; 3];
        for cx in [lo.x, hi.x] {
            for cy in [lo.y, hi.y] {
                for cz in [lo.z, hi.z] {
                    let v = g.world_to_voxel([cx, cy, cz]);
                    for a in 0..3 {
                        vlo[a] = vlo[a].min(v[a]);
                        vhi[a] = vhi[a].max(v[a]);
                    }
                }
            }
        }
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let l = (vlo[a].floor() - 1.0).max(0.0);
            let h = (vhi[a].ceil() + 1.0).min(dims[a] as f64 - 1.0);
            if h < l || vhi[a] < -1.0 || vlo[a] > dims[a] as f64 {
                return Vec::new();
            }
            range[a] = (l as usize, h as usize);
        }
        let mut out = Vec::new();
        for z in range[2].0..=range[2].1 {
            for y in range[1].0..=range[1].1 {
                for x in range[0].0..=range[0].1 {
                    if footprint.contains(g.voxel_to_world([x as f64, y as f64, z as f64])) {
                        out.push(g.index(x, y, z));
                    }
                }
            }
        }
        out
    }

    fn carve_footprint(&mut self, footprint: &Footprint) -> (Vec<(u32, u16)>, bool) {
        let mut changes = Vec::new();
        let mut violation = false;
        for i in self.footprint_voxels(footprint) {
            let l = self.grid.data()[i];
            if l == 0 {
                continue;
            }
            if self.protected_labels.contains(&l) {
                violation = true;
                continue;
            }
            changes.push((i as u32, l));
        }
        let data = self.grid.data_mut();
        for &(i, _) in &changes {
            data[i as usize] = 0;
        }
        (changes, violation)
    }

    /// Reverts the most recent carve; `None` when there is nothing to undo.
    pub fn undo(&mut self) -> Option<Vec<ChunkMesh>> {
        let diff = self.undo.pop()?;
        let data = self.grid.data_mut();
        for &(i, old) in &diff.changes {
            data[i as usize] = old;
        }
        for &(_, old) in &diff.changes {
            let e = self.ledger.get_mut(&old).expect("ledger entry for undone carve");
            *e -= 1;
            if *e == 0 {
                self.ledger.remove(&old);
            }
        }
        self.carve_count -= 1;
        self.violation_count -= diff.violation as u64;
        Some(self.remesh(&diff.changes))
    }

    fn default_visibility(&self) -> VisibilityConfig {
        VisibilityConfig {
            structures: self
                .grid
                .present_labels()
                .into_iter()
                .map(|l| (structure_name(&self.grid, l), true))
                .collect(),
            regions: [("body".to_string(), true)].into(),
            corridor: None,
            isolated: false,
        }
    }

    pub fn visibility(&self) -> &VisibilityConfig {
        &self.visibility
    }

    pub fn set_visibility(&mut self, structure: &str, visible: bool) -> Result<&VisibilityConfig> {
        match self.visibility.structures.get_mut(structure) {
            Some(v) => *v = visible,
            None => match self.visibility.regions.get_mut(structure) {
                Some(v) => *v = visible,
                None => return Err(Error::UnknownStructure(structure.to_string())),
            },
        }
        Ok(&self.visibility)
    }

    /// Posterior access corridor over the selected levels: their axial
    /// span plus 10 mm, with body content outside it hidden.
    pub fn auto_exposure(&mut self, levels: &[StructureId]) -> Result<&VisibilityConfig> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("exposure needs at least one level".into()));
        }
        const MARGIN: f64 = 10.0;
        let g = self.grid.geometry();
        let wanted: BTreeSet<u16> = levels.iter().map(|l| l.label()).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut centroid_y = 0.0;
        let mut n = 0usize;
        for (i, &l) in self.grid.data().iter().enumerate() {
            if !wanted.contains(&l) {
                continue;
            }
            let [x, y, z] = g.coords(i);
            let w = g.voxel_to_world([x as f64, y as f64, z as f64]);
            for a in 0..3 {
                lo[a] = lo[a].min(w[a]);
                hi[a] = hi[a].max(w[a]);
            }
            centroid_y += w[1];
            n += 1;
        }
        for l in levels {
            if !l.is_level() || self.grid.count(l.label()) == 0 {
                return Err(Error::UnknownStructure(format!("level {l} is not in the model")));
            }
        }
        let corridor = Corridor {
            axial_mm: [lo[2] - MARGIN, hi[2] + MARGIN],
            lateral_mm: [lo[0] - MARGIN, hi[0] + MARGIN],
            anterior_limit_mm: centroid_y / n as f64,
            levels: levels.to_vec(),
        };
        self.visibility.regions.insert("body".into(), false);
        self.visibility.regions.insert("body_in_corridor".into(), true);
        self.visibility.corridor = Some(corridor);
        Ok(&self.visibility)
    }

    /// Shows only the labelled structures when on; off restores the
    /// visibility in place before the matching `on`.
    pub fn isolate_spine(&mut self, on: bool) -> &VisibilityConfig {
        if on && !self.visibility.isolated {
            self.saved_visibility = Some(self.visibility.clone());
            for v in self.visibility.regions.values_mut() {
                *v = false;
            }
            self.visibility.isolated = true;
        } else if !on && self.visibility.isolated {
            if let Some(saved) = self.saved_visibility.take() {
                self.visibility = saved;
            }
        }
        &self.visibility
    }

    pub fn decompression_report(&self) -> DecompressionReport {
        let vv = self.grid.geometry().voxel_volume();
        let names: BTreeMap<u16, String> = self.ledger.keys().map(|&l| (l, structure_name(&self.grid, l))).collect();
        DecompressionReport {
            removed_mm3: self.ledger.iter().map(|(l, &n)| (names[l].clone(), n as f64 * vv)).collect(),
            removed_voxels: self.ledger.iter().map(|(l, &n)| (names[l].clone(), n)).collect(),
            violation_count: self.violation_count,
            carve_count: self.carve_count,
        }
    }

    /// SHA-256 of the working label grid.
    pub fn grid_checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in self.grid.data() {
            h.update(l.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every cached chunk mesh in chunk order.
    pub fn scene_checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.chunks {
            for s in &c.structures {
                h.update(s.label.to_le_bytes());
                for p in &s.positions {
                    for v in p {
                        h.update(v.to_le_bytes());
                    }
                }
                for i in &s.indices {
                    h.update(i.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Outcome of replaying a script without any client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub commands: usize,
    pub removed_total: u64,
    pub ledger: BTreeMap<String, u64>,
    pub report: DecompressionReport,
    pub grid_checksum: String,
}

impl SimSession {
    pub fn summary(&self, commands: usize, removed_total: u64) -> ReplaySummary {
        let report = self.decompression_report();
        ReplaySummary {
            commands,
            removed_total,
            ledger: report.removed_voxels.clone(),
            report,
            grid_checksum: self.grid_checksum(),
        }
    }
}

pub fn load_script(path: impl AsRef<Path>) -> Result<Vec<CarveCommand>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn replay(model: &LabelMap, config: SessionConfig, script: &[CarveCommand]) -> Result<(SimSession, ReplaySummary)> {
    let mut s = SimSession::new(model, config)?;
    let mut removed = 0;
    for cmd in script {
        removed += s.apply_carve(cmd)?.removed_total();
    }
    let summary = s.summary(script.len(), removed);
    Ok((s, summary))
}
