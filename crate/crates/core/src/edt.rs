//! Exact Euclidean distance transform on anisotropic grids (separable
//! lower-envelope-of-parabolas method), with the nearest site per voxel.

use rayon::prelude::*;

use crate::volume::Geometry;

pub struct DistanceField {
    /// Distance in mm from each voxel centre to the nearest site centre.
    pub distance: Vec<f64>,
    /// Linear index of that site (`u32::MAX` when there are no sites).
    pub nearest: Vec<u32>,
}

const NONE: u32 = u32::MAX;

/// 1-D pass: `out[q] = min_p (s (q - p))^2 + f[p]` along one line.
fn envelope(f: &[f64], site: &[u32], s: f64, out_f: &mut [f64], out_site: &mut [u32], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |p: usize| s * p as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (xq, xp) = (pos(q), pos(p));
                    let inter = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if inter <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(inter);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out_f.iter_mut().for_each(|x| *x = f64::INFINITY);
        out_site.iter_mut().for_each(|x| *x = NONE);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        let xq = pos(q);
        while k + 1 < v.len() && z[k + 1] < xq {
            k += 1;
        }
        let p = v[k];
        let d = xq - pos(p);
        out_f[q] = d * d + f[p];
        out_site[q] = site[p];
    }
}

/// Distance from every voxel centre to the nearest voxel with `is_site`.
pub fn distance_transform(geometry: &Geometry, is_site: impl Fn(usize) -> bool + Sync) -> DistanceField {
    let dims = geometry.dims();
    let spacing = geometry.spacing();
    let len = geometry.len();
    let mut f: Vec<f64> = (0..len).into_par_iter().map(|i| if is_site(i) { 0.0 } else { f64::INFINITY }).collect();
    let mut site: Vec<u32> = (0..len).map(|i| if f[i] == 0.0 { i as u32 } else { NONE }).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..len).filter(|&i| geometry.coords(i)[axis] == 0).collect();
        let lines: Vec<(Vec<f64>, Vec<u32>)> = others
            .par_iter()
            .map_init(
                || (Vec::new(), Vec::new()),
                |(v, z), &start| {
                    let lf: Vec<f64> = (0..n).map(|q| f[start + q * stride]).collect();
                    let ls: Vec<u32> = (0..n).map(|q| site[start + q * stride]).collect();
                    let mut of = vec![0.0; n];
                    let mut os = vec![0; n];
                    envelope(&lf, &ls, spacing[axis], &mut of, &mut os, v, z);
                    (of, os)
                },
            )
            .collect();
        for (&start, (of, os)) in others.iter().zip(lines) {
            for q in 0..n {
                f[start + q * stride] = of[q];
                site[start + q * stride] = os[q];
            }
        }
    }
    DistanceField {
        distance: f.into_iter().map(f64::sqrt).collect(),
        nearest: site,
    }
}
