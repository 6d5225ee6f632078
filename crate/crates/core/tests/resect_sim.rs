use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinesim::mesh::mc;
use spinesim::sim::*;
use spinesim::{Geometry, LabelMap, StructureId};

const CORD: u16 = 200;
const BONE: u16 = 23;
const LF: u16 = 203;

/// 32³ at 1 mm: cord column along z at (16, 12), bone block behind it,
/// ligament slab between.
fn model(n: usize) -> LabelMap {
    let g = Geometry::identity([n, n, n]);
    let mut data = vec![0u16; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - 16.0, y as f64 - 12.0);
                let l = if dx * dx + dy * dy <= 9.0 {
                    CORD
                } else if (18..=20).contains(&y) && (8..24).contains(&x) {
                    LF
                } else if y >= 21 && y < n - 2 && (4..28).contains(&x) && (2..n - 2).contains(&z) {
                    BONE
                } else {
                    0
                };
                data[x + n * (y + n * z)] = l;
            }
        }
    }
    LabelMap::with_canonical_table(g, data).unwrap()
}

fn burr(seq: u64, r: f64, tip: [f64; 3]) -> CarveCommand {
    CarveCommand {
        seq,
        tool: Tool::burr(r),
        tip,
        direction: [0.0, 0.0, 1.0],
        active: true,
    }
}

fn brute_distance(lm: &LabelMap, p: [f64; 3], protected: &BTreeSet<u16>) -> f64 {
    let g = lm.geometry();
    let mut best = f64::INFINITY;
    for (i, l) in lm.data().iter().enumerate() {
        if protected.contains(l) {
            let [x, y, z] = g.coords(i);
            let w = g.voxel_to_world([x as f64, y as f64, z as f64]);
            let d = ((w[0] - p[0]).powi(2) + (w[1] - p[1]).powi(2) + (w[2] - p[2]).powi(2)).sqrt();
            best = best.min(d);
        }
    }
    best
}

fn counts(lm: &LabelMap) -> BTreeMap<u16, u64> {
    let mut m = BTreeMap::new();
    for &l in lm.data() {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

fn canonical_tris(keys: &[u64], indices: &[u32]) -> BTreeSet<[u64; 3]> {
    indices
        .chunks(3)
        .map(|t| {
            let k = [keys[t[0] as usize], keys[t[1] as usize], keys[t[2] as usize]];
            let m = (0..3).min_by_key(|&i| k[i]).unwrap();
            [k[m], k[(m + 1) % 3], k[(m + 2) % 3]]
        })
        .collect()
}

#[test]
fn session_requires_protected_structures() {
    let mut lm = model(32);
    let data: Vec<u16> = lm.data().iter().map(|&l| if l == CORD { 0 } else { l }).collect();
    lm = LabelMap::with_canonical_table(lm.geometry().clone(), data).unwrap();
    assert!(matches!(
        SimSession::new(&lm, SessionConfig::default()),
        Err(spinesim::Error::NoProtectedStructures)
    ));
}

#[test]
fn sdf_is_zero_on_cord_and_exact_elsewhere() {
    let lm = model(32);
    let s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    let protected: BTreeSet<u16> = [CORD].into();
    let g = lm.geometry();
    for (i, &d) in s.distance_field().iter().enumerate() {
        let [x, y, z] = g.coords(i);
        let b = brute_distance(&lm, [x as f64, y as f64, z as f64], &protected);
        assert!((d - b).abs() <= 1e-6, "voxel {i}: {d} vs {b}");
        if lm.data()[i] == CORD {
            assert_eq!(d, 0.0);
        }
    }
}

#[test]
fn burr_inside_bone_matches_sphere_oracle() {
    let lm = model(32);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    let tip = [16.3, 25.6, 15.2];
    let r = s.apply_carve(&burr(1, 3.0, tip)).unwrap();
    let expected = (0..lm.data().len())
        .filter(|&i| {
            let [x, y, z] = lm.geometry().coords(i);
            let d2 = (x as f64 - tip[0]).powi(2) + (y as f64 - tip[1]).powi(2) + (z as f64 - tip[2]).powi(2);
            d2 <= 9.0
        })
        .count() as u64;
    assert!(expected > 100);
    assert_eq!(r.removed_total(), expected);
    assert!(!r.violation);
    assert!(!r.dirty_chunks.is_empty());
    let rep = s.decompression_report();
    assert_eq!(rep.removed_mm3.values().sum::<f64>(), expected as f64);
    assert_eq!(rep.carve_count, 1);
}

#[test]
fn burr_in_air_and_probes_do_nothing() {
    let lm = model(32);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    let r = s.apply_carve(&burr(1, 2.0, [3.0, 3.0, 3.0])).unwrap();
    assert_eq!(r.removed_total(), 0);
    assert!(r.dirty_chunks.is_empty());
    let before = s.grid_checksum();
    let mut probe = burr(2, 2.0, [16.0, 25.0, 15.0]);
    probe.tool = Tool::probe(ToolKind::Woodson);
    let r = s.apply_carve(&probe).unwrap();
    assert!(!r.applied);
    let mut inactive = burr(3, 2.0, [16.0, 25.0, 15.0]);
    inactive.active = false;
    assert!(!s.apply_carve(&inactive).unwrap().applied);
    assert_eq!(s.grid_checksum(), before);
}

#[test]
fn burr_on_cord_is_blocked() {
    let lm = model(32);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    let before = s.protected_voxel_count();
    let r = s.apply_carve(&burr(1, 6.0, [16.0, 16.0, 16.0])).unwrap();
    assert!(r.violation);
    assert!(r.removed_total() > 0);
    assert_eq!(s.protected_voxel_count(), before);
    assert_eq!(r.alarm.level, AlarmLevel::Danger);
    assert_eq!(s.decompression_report().violation_count, 1);
}

#[test]
fn command_validation() {
    let lm = model(32);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    s.apply_carve(&burr(5, 1.0, [3.0, 3.0, 3.0])).unwrap();
    assert!(s.apply_carve(&burr(5, 1.0, [3.0, 3.0, 3.0])).is_err());
    let mut c = burr(6, 1.0, [3.0, 3.0, 3.0]);
    c.direction = [0.0, 0.0, 1.1];
    assert!(s.apply_carve(&c).is_err());
    assert!(s.apply_carve(&burr(7, -1.0, [3.0, 3.0, 3.0])).is_err());
}

#[test]
fn kerrison_bite_is_an_oriented_box() {
    let lm = model(32);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    let cmd = CarveCommand {
        seq: 1,
        tool: Tool::kerrison(4.0, 3.0, 2.0),
        tip: [16.0, 22.0, 16.0],
        direction: [0.0, 1.0, 0.0],
        active: true,
    };
    let r = s.apply_carve(&cmd).unwrap();
    // y in [22, 25], x and z spans of 4 and 2 mm around the tip in some
    // order: 4 * 5 * 3 voxel centres
    assert_eq!(r.removed_total(), 5 * 4 * 3);
}

#[test]
fn proximity_thresholds() {
    let lm = model(32);
    let s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    let protected: BTreeSet<u16> = [CORD].into();
    let far = s.proximity([16.0, 25.0, 16.0]);
    assert_eq!(far.level, AlarmLevel::None);
    let tip = [16.0, 16.5, 16.0];
    let warn = s.proximity(tip);
    assert_eq!(warn.level, AlarmLevel::Warn);
    assert!((warn.distance() - brute_distance(&lm, tip, &protected)).abs() <= 1.0);
    assert_eq!(warn.structure.as_deref(), Some("spinal_cord"));
    let on = s.proximity([16.0, 15.0, 16.0]);
    assert_eq!(on.level, AlarmLevel::Danger);
    assert!(on.distance() < 1e-9);
    let out = s.proximity([-5.0, 0.0, 0.0]);
    assert_eq!(out.level, AlarmLevel::None);
    assert_eq!(out.distance(), f64::INFINITY);
}

#[test]
fn undo_restores_in_order() {
    let lm = model(32);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    assert!(s.undo().is_none());
    let g0 = s.grid().data().to_vec();
    s.apply_carve(&burr(1, 3.0, [10.0, 25.0, 10.0])).unwrap();
    let g1 = s.grid().data().to_vec();
    s.apply_carve(&burr(2, 3.0, [12.0, 25.0, 11.0])).unwrap();
    s.undo().unwrap();
    assert_eq!(s.grid().data(), &g1[..]);
    s.undo().unwrap();
    assert_eq!(s.grid().data(), &g0[..]);
    let rep = s.decompression_report();
    assert!(rep.removed_voxels.is_empty());
    assert_eq!(rep.carve_count, 0);
}

#[test]
fn second_identical_carve_removes_nothing() {
    let lm = model(32);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    assert!(s.apply_carve(&burr(1, 2.5, [20.0, 24.0, 9.0])).unwrap().removed_total() > 0);
    assert_eq!(s.apply_carve(&burr(2, 2.5, [20.0, 24.0, 9.0])).unwrap().removed_total(), 0);
}

#[test]
fn chunk_meshes_weld_into_the_whole_surface() {
    let lm = model(40);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    s.apply_carve(&burr(1, 4.0, [16.0, 22.0, 16.0])).unwrap();
    let dims = s.grid().geometry().dims();
    for label in [BONE, LF, CORD] {
        let mut from_chunks = BTreeSet::new();
        for c in s.chunks() {
            for p in c.structures.iter().filter(|p| p.label == label) {
                let tris = canonical_tris(&p.keys, &p.indices);
                from_chunks.extend(tris);
            }
        }
        let data = s.grid().data();
        let whole = mc::extract_region(dims, |i| data[i] == label, [-1; 3], dims.map(|d| d as i64));
        let flat: Vec<u32> = whole.triangles.iter().flatten().copied().collect();
        assert_eq!(from_chunks, canonical_tris(&whole.keys, &flat), "label {label}");
    }
}

#[test]
fn exposure_and_isolation() {
    let lm = model(32);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    assert!(s.auto_exposure(&[]).is_err());
    assert!(s.auto_exposure(&[StructureId::L1]).is_err());
    let v = s.auto_exposure(&[StructureId::L4]).unwrap().clone();
    let c = v.corridor.unwrap();
    assert_eq!(c.axial_mm, [2.0 - 10.0, 29.0 + 10.0]);
    assert_eq!(v.regions["body"], false);
    let before = s.visibility().clone();
    s.isolate_spine(true);
    assert!(s.visibility().regions.values().all(|v| !v));
    s.isolate_spine(false);
    assert_eq!(s.visibility(), &before);
    s.set_visibility("ligamentum_flavum", false).unwrap();
    assert!(s.set_visibility("nonsense", false).is_err());
}

/// Random carves then a full check of every invariant.
#[test]
fn carve_fuzz_invariants() {
    let lm = model(32);
    let initial = counts(&lm);
    let mut s = SimSession::new(&lm, SessionConfig::default()).unwrap();
    let protected = s.protected_voxel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seq in 0..400u64 {
        let tip = [rng.gen_range(-2.0..34.0), rng.gen_range(-2.0..34.0), rng.gen_range(-2.0..34.0)];
        let d: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-3);
        let tool = if rng.gen_bool(0.5) {
            Tool::burr(rng.gen_range(0.5..4.0))
        } else {
            Tool::kerrison(rng.gen_range(0.5..5.0), rng.gen_range(0.5..5.0), rng.gen_range(0.5..5.0))
        };
        let cmd = CarveCommand {
            seq,
            tool,
            tip,
            direction: if n < 1e-2 { [1.0, 0.0, 0.0] } else { d.map(|v| v / n) },
            active: true,
        };
        let before = s.grid().data().to_vec();
        let fp = Footprint::of(&cmd).unwrap();
        let oracle = before
            .iter()
            .enumerate()
            .filter(|&(i, &l)| {
                let [x, y, z] = s.grid().geometry().coords(i);
                l != 0 && !s.is_protected(l) && fp.contains([x as f64, y as f64, z as f64])
            })
            .count() as u64;
        let r = s.apply_carve(&cmd).unwrap();
        assert_eq!(r.removed_total(), oracle);
        assert_eq!(s.protected_voxel_count(), protected);
        for (i, c) in s.chunks().iter().enumerate() {
            if i % 7 == seq as usize % 7 {
                assert_eq!(c, &s.mesh_chunk(c.chunk));
            }
        }
    }
    let now = counts(s.grid());
    for (&l, &n) in initial.iter().filter(|(l, _)| **l != 0) {
        let removed = s.ledger().get(&l).copied().unwrap_or(0);
        assert_eq!(n, now.get(&l).copied().unwrap_or(0) + removed, "label {l}");
    }
    for c in s.chunks() {
        assert_eq!(c, &s.mesh_chunk(c.chunk));
    }
    while s.undo().is_some() {}
    assert_eq!(s.grid().data(), lm.data());
    for c in s.chunks() {
        assert_eq!(c, &s.mesh_chunk(c.chunk));
    }
}

#[test]
fn replay_is_deterministic_and_scripts_round_trip() {
    let lm = model(32);
    let script: Vec<CarveCommand> = (0..20).map(|i| burr(i, 2.0, [8.0 + i as f64, 24.0, 14.0])).collect();
    let json = serde_json::to_string(&script).unwrap();
    let back: Vec<CarveCommand> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, script);
    let (_, a) = replay(&lm, SessionConfig::default(), &script).unwrap();
    let (_, b) = replay(&lm, SessionConfig::default(), &back).unwrap();
    assert_eq!(a, b);
    assert!(a.removed_total > 0);
}
