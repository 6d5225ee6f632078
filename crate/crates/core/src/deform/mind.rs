//! Modality-independent self-similarity descriptors over the six axial
//! neighbours.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{gaussian_smooth_in_place, Geometry, Volume};

pub const CHANNELS: usize = 6;

/// The six axial unit offsets, in channel order.
pub const OFFSETS: [[i64; 3]; CHANNELS] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MindParams {
    /// Gaussian patch sigma in voxels.
    pub patch_sigma: f64,
    /// Variance clamp bounds as multiples of the image-wide mean variance.
    pub variance_clamp: [f64; 2],
}

impl Default for MindParams {
    fn default() -> Self {
        MindParams {
            patch_sigma: 0.8,
            variance_clamp: [1e-3, 1e3],
        }
    }
}

/// Six descriptor channels per voxel, each in (0, 1], max 1 per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorField {
    geometry: Geometry,
    channels: [Vec<f32>; CHANNELS],
}

impl DescriptorField {
    pub fn new(geometry: Geometry, channels: [Vec<f32>; CHANNELS]) -> Result<Self> {
        if channels.iter().any(|c| c.len() != geometry.len()) {
            return Err(Error::InvalidArgument("descriptor channel length mismatch".into()));
        }
        Ok(DescriptorField { geometry, channels })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn channels(&self) -> &[Vec<f32>; CHANNELS] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    pub fn at(&self, index: usize) -> [f32; CHANNELS] {
        std::array::from_fn(|c| self.channels[c][index])
    }
}

pub fn mind_descriptors(v: &Volume, params: &MindParams) -> Result<DescriptorField> {
    if !(params.patch_sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "patch_sigma must be positive, got {}",
            params.patch_sigma
        )));
    }
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("input volume for descriptors".into()));
    }
    let g = v.geometry();
    let dims = g.dims();
    let data = v.data();

    let patch_distances: Vec<Vec<f32>> = OFFSETS
        .par_iter()
        .map(|off| -> Result<Vec<f32>> {
            let mut d: Vec<f32> = (0..g.len())
                .map(|i| {
                    let c = g.coords(i);
                    let n: [usize; 3] =
                        std::array::from_fn(|a| (c[a] as i64 + off[a]).clamp(0, dims[a] as i64 - 1) as usize);
                    let diff = data[i] as f64 - data[g.index(n[0], n[1], n[2])] as f64;
                    (diff * diff) as f32
                })
                .collect();
            gaussian_smooth_in_place(&mut d, dims, params.patch_sigma)?;
            Ok(d)
        })
        .collect::<Result<_>>()?;

    let variance: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map(|i| patch_distances.iter().map(|d| d[i] as f64).sum::<f64>() / CHANNELS as f64)
        .collect();
    let mean_var = variance.iter().sum::<f64>() / variance.len() as f64;
    let (lo, hi) = (params.variance_clamp[0] * mean_var, params.variance_clamp[1] * mean_var);

    let per_voxel: Vec<[f32; CHANNELS]> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            if mean_var <= 0.0 {
                return [1.0; CHANNELS];
            }
            let var = variance[i].clamp(lo, hi);
            let raw: [f64; CHANNELS] = std::array::from_fn(|c| (-(patch_distances[c][i] as f64) / var).exp());
            let max = raw.iter().copied().fold(f64::MIN, f64::max);
            raw.map(|r| (r / max) as f32)
        })
        .collect();

    let channels = std::array::from_fn(|c| per_voxel.iter().map(|d| d[c]).collect());
    DescriptorField::new(g.clone(), channels)
}
