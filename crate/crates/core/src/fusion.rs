//! Segmentation fusion: voxel-wise union of two vertebral label maps,
//! connected-component cleanup, per-level centroids, and merging bone with
//! soft-tissue labels into a single model.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::{StructureClass, StructureId};
use crate::volume::{LabelMap, Point3};

/// Where both inputs are labelled, the primary label is kept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPolicy {
    /// Structures only the secondary segmentation is expected to provide.
    pub secondary_only_labels: BTreeSet<StructureId>,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        FusionPolicy {
            secondary_only_labels: [StructureId::SACRUM].into_iter().collect(),
        }
    }
}

/// Structure classes in descending priority for overlap resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePrecedence {
    pub classes: Vec<StructureClass>,
}

impl Default for MergePrecedence {
    fn default() -> Self {
        MergePrecedence {
            classes: vec![
                StructureClass::SpinalCord,
                StructureClass::NerveRoots,
                StructureClass::Csf,
                StructureClass::LigamentumFlavum,
                StructureClass::Disc,
                StructureClass::Vertebra,
                StructureClass::Sacrum,
            ],
        }
    }
}

impl MergePrecedence {
    fn rank(&self, label: u16) -> Option<usize> {
        let class = StructureId::from_label(label).ok()?.class()?;
        self.classes.iter().position(|c| *c == class)
    }
}

fn merged_table(a: &LabelMap, b: &LabelMap, data: &[u16]) -> BTreeMap<u16, String> {
    let present: BTreeSet<u16> = data.iter().copied().filter(|&l| l != 0).collect();
    let mut table = BTreeMap::new();
    for l in present {
        let name = a
            .label_table()
            .get(&l)
            .or_else(|| b.label_table().get(&l))
            .cloned()
            .expect("every output label comes from an input table");
        table.insert(l, name);
    }
    table
}

pub fn fuse_union(primary: &LabelMap, secondary: &LabelMap, policy: &FusionPolicy) -> Result<LabelMap> {
    primary.geometry().ensure_matches(secondary.geometry(), "fuse_union")?;
    let overlap: Vec<StructureId> = policy
        .secondary_only_labels
        .iter()
        .copied()
        .filter(|s| primary.label_table().contains_key(&s.label()) && primary.count(s.label()) > 0)
        .collect();
    if !overlap.is_empty() {
        warn!("primary segmentation already contains secondary-only structures {overlap:?}");
    }
    let data: Vec<u16> = primary
        .data()
        .iter()
        .zip(secondary.data())
        .map(|(&p, &s)| if p != 0 { p } else { s })
        .collect();
    let table = merged_table(primary, secondary, &data);
    LabelMap::new(primary.geometry().clone(), data, table)
}

/// Keeps only the largest 26-connected component of `label`. Ties go to the
/// component containing the smallest linear index.
pub fn largest_component(lm: &LabelMap, label: u16) -> LabelMap {
    let g = lm.geometry();
    let [nx, ny, nz] = g.dims();
    let data = lm.data();
    let mut component = vec![u32::MAX; data.len()];
    let mut best: Option<(u32, usize)> = None;
    let mut next_id = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] != label || component[start] != u32::MAX {
            continue;
        }
        let id = next_id;
        next_id += 1;
        component[start] = id;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = g.coords(i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                            continue;
                        }
                        let j = g.index(xx as usize, yy as usize, zz as usize);
                        if data[j] == label && component[j] == u32::MAX {
                            component[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    let Some((keep, _)) = best else {
        return lm.clone();
    };
    let out: Vec<u16> = data
        .iter()
        .zip(&component)
        .map(|(&l, &c)| if l == label && c != keep { 0 } else { l })
        .collect();
    let table = lm
        .label_table()
        .iter()
        .filter(|(l, _)| **l != label || out.contains(l))
        .map(|(l, n)| (*l, n.clone()))
        .collect();
    LabelMap::new(g.clone(), out, table).expect("subset of a valid label map")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub found: Vec<(StructureId, Point3)>,
    pub missing: Vec<StructureId>,
}

impl Centroids {
    pub fn get(&self, id: StructureId) -> Option<Point3> {
        self.found.iter().find(|(s, _)| *s == id).map(|(_, p)| *p)
    }
}

/// Mean world position of voxel centres per requested label.
pub fn label_centroids(lm: &LabelMap, labels: &BTreeSet<StructureId>) -> Centroids {
    let g = lm.geometry();
    let mut sums: BTreeMap<u16, ([f64; 3], usize)> = labels.iter().map(|s| (s.label(), ([0.0; 3], 0))).collect();
    for (i, &l) in lm.data().iter().enumerate() {
        if let Some((sum, n)) = sums.get_mut(&l) {
            let [x, y, z] = g.coords(i);
            let w = g.voxel_to_world([x as f64, y as f64, z as f64]);
            for a in 0..3 {
                sum[a] += w[a];
            }
            *n += 1;
        }
    }
    let mut out = Centroids::default();
    for id in labels {
        let (sum, n) = sums[&id.label()];
        if n == 0 {
            out.missing.push(*id);
        } else {
            out.found.push((*id, sum.map(|s| s / n as f64)));
        }
    }
    out
}

/// Per voxel, the highest-precedence nonzero label wins; equal classes
/// favour `bone`.
pub fn merge_structures(bone: &LabelMap, soft: &LabelMap, precedence: &MergePrecedence) -> Result<LabelMap> {
    bone.geometry().ensure_matches(soft.geometry(), "merge_structures")?;
    for l in bone.present_labels().into_iter().chain(soft.present_labels()) {
        if precedence.rank(l).is_none() {
            return Err(Error::InvalidArgument(format!(
                "label {l} has no place in the merge precedence"
            )));
        }
    }
    let data: Vec<u16> = bone
        .data()
        .iter()
        .zip(soft.data())
        .map(|(&b, &s)| match (b, s) {
            (0, s) => s,
            (b, 0) => b,
            (b, s) => {
                if precedence.rank(s) < precedence.rank(b) {
                    s
                } else {
                    b
                }
            }
        })
        .collect();
    let table = merged_table(bone, soft, &data);
    LabelMap::new(bone.geometry().clone(), data, table)
}
