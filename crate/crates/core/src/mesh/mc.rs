//! Marching cubes over a binary indicator at iso level 0.5.
//!
//! The case table is derived rather than transcribed: on every cube face the
//! crossing edges are paired so that each run of inside corners is cut off
//! on its own (diagonal inside corners stay separate). Both cubes sharing a
//! face derive the same segments with opposite direction, which is what
//! makes the surface closed. Segments are chained into loops and each loop
//! is fan-triangulated.

use std::collections::HashMap;
use std::sync::OnceLock;

/// Local edge index for the edge leaving `base` along `axis`.
fn edge_index(base: usize, axis: usize) -> usize {
    let (b0, b1) = match axis {
        0 => ((base >> 1) & 1, (base >> 2) & 1),
        1 => (base & 1, (base >> 2) & 1),
        _ => (base & 1, (base >> 1) & 1),
    };
    axis * 4 + b0 + 2 * b1
}

/// Base corner and axis of a local edge.
pub(crate) fn edge_endpoints(e: usize) -> (usize, usize) {
    let axis = e / 4;
    let b0 = e & 1;
    let b1 = (e >> 1) & 1;
    let base = match axis {
        0 => (b0 << 1) | (b1 << 2),
        1 => b0 | (b1 << 2),
        _ => b0 | (b1 << 1),
    };
    (base, axis)
}

fn edge_between(a: usize, b: usize) -> usize {
    let diff = a ^ b;
    let axis = diff.trailing_zeros() as usize;
    edge_index(a.min(b), axis)
}

fn corner(bits: [usize; 3]) -> usize {
    bits[0] | (bits[1] << 1) | (bits[2] << 2)
}

/// Corners of each face, counter-clockwise seen from outside the cube.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..3 {
        let u = (a + 1) % 3;
        let v = (a + 2) % 3;
        for side in 0..2 {
            let order: [(usize, usize); 4] = if side == 1 {
                [(0, 0), (1, 0), (1, 1), (0, 1)]
            } else {
                [(0, 0), (0, 1), (1, 1), (1, 0)]
            };
            let mut f = [0; 4];
            for (i, &(cu, cv)) in order.iter().enumerate() {
                let mut bits = [0; 3];
                bits[a] = side;
                bits[u] = cu;
                bits[v] = cv;
                f[i] = corner(bits);
            }
            out.push(f);
        }
    }
    out
}

fn build_case(case: usize) -> CaseEntry {
    let inside = |c: usize| (case >> c) & 1 == 1;
    let mut next: HashMap<usize, usize> = HashMap::new();
    for f in faces() {
        let s: Vec<bool> = f.iter().map(|&c| inside(c)).collect();
        if s.iter().all(|&x| x) || s.iter().all(|&x| !x) {
            continue;
        }
        // Each maximal cyclic run of inside corners yields one segment from
        // the edge where the run is entered to the edge where it is left;
        // this direction gives outward-facing triangles.
        for start in 0..4 {
            if !s[start] || s[(start + 3) % 4] {
                continue;
            }
            let mut end = start;
            while s[(end + 1) % 4] {
                end = (end + 1) % 4;
            }
            let enter = edge_between(f[(start + 3) % 4], f[start]);
            let leave = edge_between(f[end], f[(end + 1) % 4]);
            let prev = next.insert(enter, leave);
            debug_assert!(prev.is_none());
        }
    }
    let mut entry = CaseEntry::default();
    let mut keys: Vec<usize> = next.keys().copied().collect();
    keys.sort_unstable();
    let mut used = [false; 12];
    for k in keys {
        if used[k] {
            continue;
        }
        let mut lp = vec![k];
        used[k] = true;
        let mut cur = next[&k];
        while cur != k {
            used[cur] = true;
            lp.push(cur);
            cur = next[&cur];
        }
        entry.add_loop(&lp);
    }
    entry
}

/// The two faces (axis, side) an edge lies on.
fn edge_faces(e: usize) -> [(usize, usize); 2] {
    let (base, axis) = edge_endpoints(e);
    let a = (axis + 1) % 3;
    let b = (axis + 2) % 3;
    [(a, (base >> a) & 1), (b, (base >> b) & 1)]
}

fn share_face(e: usize, f: usize) -> bool {
    let fe = edge_faces(e);
    edge_faces(f).iter().any(|x| fe.contains(x))
}

/// Triangles of one cube case. Vertex ids below 12 are cube edges; id
/// `12 + k` is the centroid of the edges in `centers[k]`.
#[derive(Clone, Debug, Default)]
pub(crate) struct CaseEntry {
    pub tris: Vec<[u8; 3]>,
    pub centers: Vec<Vec<u8>>,
}

impl CaseEntry {
    fn add_loop(&mut self, lp: &[usize]) {
        let n = lp.len();
        // A fan diagonal joining two vertices of one face would put a
        // triangle (or a doubled edge) on the face shared with the
        // neighbouring cube.
        let apex = (0..n).find(|&s| (2..n - 1).all(|i| !share_face(lp[s], lp[(s + i) % n])));
        match apex {
            Some(s) => {
                for i in 1..n - 1 {
                    self.tris.push([lp[s] as u8, lp[(s + i) % n] as u8, lp[(s + i + 1) % n] as u8]);
                }
            }
            None => {
                let c = (12 + self.centers.len()) as u8;
                self.centers.push(lp.iter().map(|&e| e as u8).collect());
                for i in 0..n {
                    self.tris.push([c, lp[i] as u8, lp[(i + 1) % n] as u8]);
                }
            }
        }
    }
}

pub(crate) fn case_table() -> &'static [CaseEntry] {
    static TABLE: OnceLock<Vec<CaseEntry>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(build_case).collect())
}

/// Triangles in lattice-edge terms for the cubes `lo..hi` (per axis, lower
/// corner lattice coordinates, `-1` allowed). Vertices are keyed by global
/// lattice edge so pieces from adjacent regions weld exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeshPart {
    /// Global lattice-edge key per vertex.
    pub keys: Vec<u64>,
    /// Vertex positions in voxel coordinates.
    pub voxel_positions: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

pub fn edge_key(dims: [usize; 3], p: [i64; 3], axis: usize) -> u64 {
    let (sx, sy) = (dims[0] as u64 + 2, dims[1] as u64 + 2);
    let lin = (p[0] + 1) as u64 + sx * ((p[1] + 1) as u64 + sy * (p[2] + 1) as u64);
    lin * 3 + axis as u64
}

fn center_key(dims: [usize; 3], cube: [i64; 3], slot: usize) -> u64 {
    let edges = (dims[0] as u64 + 2) * (dims[1] as u64 + 2) * (dims[2] as u64 + 2) * 3;
    edges + edge_key(dims, cube, 0) / 3 * 4 + slot as u64
}

pub fn extract_region(
    dims: [usize; 3],
    inside: impl Fn(usize) -> bool,
    lo: [i64; 3],
    hi: [i64; 3],
) -> MeshPart {
    let table = case_table();
    let at = |p: [i64; 3]| -> bool {
        if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as i64) {
            return false;
        }
        inside(p[0] as usize + dims[0] * (p[1] as usize + dims[1] * p[2] as usize))
    };
    let mut part = MeshPart::default();
    let mut index: HashMap<u64, u32> = HashMap::new();
    for k in lo[2]..hi[2] {
        for j in lo[1]..hi[1] {
            for i in lo[0]..hi[0] {
                let mut case = 0usize;
                for c in 0..8 {
                    if at([i + (c & 1) as i64, j + ((c >> 1) & 1) as i64, k + ((c >> 2) & 1) as i64]) {
                        case |= 1 << c;
                    }
                }
                let entry = &table[case];
                if entry.tris.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 16];
                for t in &entry.tris {
                    let mut out = [0u32; 3];
                    for (o, &e) in out.iter_mut().zip(t) {
                        let e = e as usize;
                        if local[e] == u32::MAX && e >= 12 {
                            let edges = &entry.centers[e - 12];
                            let mut pos = [0.0; 3];
                            for &ce in edges {
                                let (base, axis) = edge_endpoints(ce as usize);
                                pos[0] += (i + (base & 1) as i64) as f64;
                                pos[1] += (j + ((base >> 1) & 1) as i64) as f64;
                                pos[2] += (k + ((base >> 2) & 1) as i64) as f64;
                                pos[axis] += 0.5;
                            }
                            let pos = pos.map(|v| v / edges.len() as f64);
                            let key = center_key(dims, [i, j, k], e - 12);
                            local[e] = *index.entry(key).or_insert_with(|| {
                                part.keys.push(key);
                                part.voxel_positions.push(pos);
                                (part.keys.len() - 1) as u32
                            });
                        }
                        if local[e] == u32::MAX {
                            let (base, axis) = edge_endpoints(e);
                            let p = [i + (base & 1) as i64, j + ((base >> 1) & 1) as i64, k + ((base >> 2) & 1) as i64];
                            let key = edge_key(dims, p, axis);
                            local[e] = *index.entry(key).or_insert_with(|| {
                                let mut pos = [p[0] as f64, p[1] as f64, p[2] as f64];
                                pos[axis] += 0.5;
                                part.keys.push(key);
                                part.voxel_positions.push(pos);
                                (part.keys.len() - 1) as u32
                            });
                        }
                        *o = local[e];
                    }
                    part.triangles.push(out);
                }
            }
        }
    }
    part
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_indexing_round_trips() {
        for e in 0..12 {
            let (b, a) = edge_endpoints(e);
            assert_eq!(edge_index(b, a), e);
            assert_eq!((b >> a) & 1, 0);
        }
    }

    #[test]
    fn table_edges_pair_up_per_case() {
        // Within one cube every directed edge of every loop appears once.
        for (case, entry) in case_table().iter().enumerate() {
            let crossing = (0..12)
                .filter(|&e| {
                    let (b, a) = edge_endpoints(e);
                    ((case >> b) & 1) != ((case >> (b | (1 << a))) & 1)
                })
                .count();
            let used: std::collections::BTreeSet<u8> = entry.tris.iter().flatten().copied().filter(|&e| e < 12).collect();
            assert_eq!(used.len(), crossing, "case {case}");
        }
        assert!(case_table()[0].tris.is_empty() && case_table()[255].tris.is_empty());
    }
}
