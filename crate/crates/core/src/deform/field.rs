//! Control-grid displacement field with trilinear upsampling, and the
//! gradient-magnitude smoothness penalty on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Point3;

/// Per-node 3-vector displacements in fixed-image voxel units. Node `k`
/// along an axis sits at fixed voxel `k * stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    fixed_dims: [usize; 3],
    stride: usize,
    grid_dims: [usize; 3],
    nodes: Vec<[f64; 3]>,
}

/// Per output coordinate: lower node, upper node, upper weight.
type AxisWeights = Vec<(usize, usize, f64)>;

fn grid_len(n: usize, stride: usize) -> usize {
    if n <= 1 {
        1
    } else {
        (n - 1).div_ceil(stride) + 1
    }
}

fn axis_weights(n: usize, stride: usize, grid: usize) -> AxisWeights {
    (0..n)
        .map(|x| {
            if grid == 1 {
                return (0, 0, 0.0);
            }
            let u = x as f64 / stride as f64;
            let i0 = (u.floor() as usize).min(grid - 2);
            (i0, i0 + 1, u - i0 as f64)
        })
        .collect()
}

impl DisplacementField {
    pub fn zeros(fixed_dims: [usize; 3], stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let grid_dims = fixed_dims.map(|n| grid_len(n, stride));
        Ok(DisplacementField {
            fixed_dims,
            stride,
            grid_dims,
            nodes: vec![[0.0; 3]; grid_dims.iter().product()],
        })
    }

    pub fn uniform(fixed_dims: [usize; 3], stride: usize, d: [f64; 3]) -> Result<Self> {
        let mut f = Self::zeros(fixed_dims, stride)?;
        f.nodes.iter_mut().for_each(|n| *n = d);
        Ok(f)
    }

    pub fn from_nodes(fixed_dims: [usize; 3], stride: usize, nodes: Vec<[f64; 3]>) -> Result<Self> {
        let mut f = Self::zeros(fixed_dims, stride)?;
        if nodes.len() != f.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} control nodes, got {}",
                f.nodes.len(),
                nodes.len()
            )));
        }
        if nodes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement nodes".into()));
        }
        f.nodes = nodes;
        Ok(f)
    }

    pub fn fixed_dims(&self) -> [usize; 3] {
        self.fixed_dims
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.nodes
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid_dims[0] * (j + self.grid_dims[1] * k)
    }

    pub fn max_abs(&self) -> f64 {
        self.nodes.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Dense displacement at every fixed voxel (x-fastest).
    pub fn upsample(&self) -> Vec<[f64; 3]> {
        let [nx, ny, nz] = self.fixed_dims;
        let [gx, gy, gz] = self.grid_dims;
        let wx = axis_weights(nx, self.stride, gx);
        let wy = axis_weights(ny, self.stride, gy);
        let wz = axis_weights(nz, self.stride, gz);

        // Expand x, then y, then z; separable trilinear interpolation.
        let mut a = vec![[0.0; 3]; nx * gy * gz];
        for k in 0..gz {
            for j in 0..gy {
                for (x, &(i0, i1, f)) in wx.iter().enumerate() {
                    let n0 = self.nodes[self.node_index(i0, j, k)];
                    let n1 = self.nodes[self.node_index(i1, j, k)];
                    a[x + nx * (j + gy * k)] = lerp3(n0, n1, f);
                }
            }
        }
        let mut b = vec![[0.0; 3]; nx * ny * gz];
        for k in 0..gz {
            for (y, &(j0, j1, f)) in wy.iter().enumerate() {
                for x in 0..nx {
                    b[x + nx * (y + ny * k)] = lerp3(a[x + nx * (j0 + gy * k)], a[x + nx * (j1 + gy * k)], f);
                }
            }
        }
        let mut out = vec![[0.0; 3]; nx * ny * nz];
        for (z, &(k0, k1, f)) in wz.iter().enumerate() {
            for y in 0..ny {
                for x in 0..nx {
                    out[x + nx * (y + ny * z)] = lerp3(b[x + nx * (y + ny * k0)], b[x + nx * (y + ny * k1)], f);
                }
            }
        }
        out
    }

    /// Adjoint of [`upsample`](Self::upsample): accumulates a dense per-voxel
    /// gradient onto the control nodes.
    pub fn adjoint(&self, dense: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let [nx, ny, nz] = self.fixed_dims;
        let [gx, gy, gz] = self.grid_dims;
        let wx = axis_weights(nx, self.stride, gx);
        let wy = axis_weights(ny, self.stride, gy);
        let wz = axis_weights(nz, self.stride, gz);

        let mut b = vec![[0.0; 3]; nx * ny * gz];
        for (z, &(k0, k1, f)) in wz.iter().enumerate() {
            for y in 0..ny {
                for x in 0..nx {
                    let g = dense[x + nx * (y + ny * z)];
                    axpy(&mut b[x + nx * (y + ny * k0)], 1.0 - f, g);
                    axpy(&mut b[x + nx * (y + ny * k1)], f, g);
                }
            }
        }
        let mut a = vec![[0.0; 3]; nx * gy * gz];
        for k in 0..gz {
            for (y, &(j0, j1, f)) in wy.iter().enumerate() {
                for x in 0..nx {
                    let g = b[x + nx * (y + ny * k)];
                    axpy(&mut a[x + nx * (j0 + gy * k)], 1.0 - f, g);
                    axpy(&mut a[x + nx * (j1 + gy * k)], f, g);
                }
            }
        }
        let mut out = vec![[0.0; 3]; gx * gy * gz];
        for k in 0..gz {
            for j in 0..gy {
                for (x, &(i0, i1, f)) in wx.iter().enumerate() {
                    let g = a[x + nx * (j + gy * k)];
                    axpy(&mut out[i0 + gx * (j + gy * k)], 1.0 - f, g);
                    axpy(&mut out[i1 + gx * (j + gy * k)], f, g);
                }
            }
        }
        out
    }

    /// Displacement at a continuous fixed-voxel coordinate (clamped to the grid).
    pub fn at_voxel(&self, p: Point3) -> [f64; 3] {
        let w: [(usize, usize, f64); 3] = std::array::from_fn(|a| {
            let g = self.grid_dims[a];
            if g == 1 {
                return (0, 0, 0.0);
            }
            let u = (p[a] / self.stride as f64).clamp(0.0, (g - 1) as f64);
            let i0 = (u.floor() as usize).min(g - 2);
            (i0, i0 + 1, u - i0 as f64)
        });
        let mut out = [0.0; 3];
        for (dz, wz) in [(w[2].0, 1.0 - w[2].2), (w[2].1, w[2].2)] {
            for (dy, wy) in [(w[1].0, 1.0 - w[1].2), (w[1].1, w[1].2)] {
                for (dx, wx) in [(w[0].0, 1.0 - w[0].2), (w[0].1, w[0].2)] {
                    axpy(&mut out, wx * wy * wz, self.nodes[self.node_index(dx, dy, dz)]);
                }
            }
        }
        out
    }

    /// Mean smoothed gradient magnitude over nodes and its gradient.
    ///
    /// Per node, central differences (index-clamped at the border) of all
    /// three components along all three axes give
    /// `|grad D| = sqrt(sum d^2 + eps^2) - eps`.
    pub fn regularizer_with_grad(&self, eps: f64) -> (f64, Vec<[f64; 3]>) {
        let [gx, gy, gz] = self.grid_dims;
        let count = self.nodes.len() as f64;
        let mut total = 0.0;
        let mut grad = vec![[0.0; 3]; self.nodes.len()];
        for k in 0..gz {
            for j in 0..gy {
                for i in 0..gx {
                    let c = [i, j, k];
                    let mut diffs = [[0.0; 3]; 3];
                    let mut ends = [(0usize, 0usize); 3];
                    let mut sq = 0.0;
                    for axis in 0..3 {
                        let mut hi = c;
                        let mut lo = c;
                        hi[axis] = (c[axis] + 1).min(self.grid_dims[axis] - 1);
                        lo[axis] = c[axis].saturating_sub(1);
                        let ih = self.node_index(hi[0], hi[1], hi[2]);
                        let il = self.node_index(lo[0], lo[1], lo[2]);
                        ends[axis] = (ih, il);
                        for comp in 0..3 {
                            let d = 0.5 * (self.nodes[ih][comp] - self.nodes[il][comp]);
                            diffs[axis][comp] = d;
                            sq += d * d;
                        }
                    }
                    let root = (sq + eps * eps).sqrt();
                    total += root - eps;
                    let scale = 1.0 / (root * count);
                    for axis in 0..3 {
                        let (ih, il) = ends[axis];
                        for comp in 0..3 {
                            let coef = 0.5 * scale * diffs[axis][comp];
                            grad[ih][comp] += coef;
                            grad[il][comp] -= coef;
                        }
                    }
                }
            }
        }
        (total / count, grad)
    }

    pub fn regularizer(&self, eps: f64) -> f64 {
        self.regularizer_with_grad(eps).0
    }

    /// Dense components (x, y, z) for export.
    pub fn dense_components(&self) -> [Vec<f32>; 3] {
        let dense = self.upsample();
        std::array::from_fn(|c| dense.iter().map(|d| d[c] as f32).collect())
    }
}

#[inline]
fn lerp3(a: [f64; 3], b: [f64; 3], f: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, a[2] + (b[2] - a[2]) * f]
}

#[inline]
fn axpy(acc: &mut [f64; 3], w: f64, g: [f64; 3]) {
    acc[0] += w * g[0];
    acc[1] += w * g[1];
    acc[2] += w * g[2];
}

/// JSON metadata written next to an exported field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMetadata {
    pub stride: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub grid_dims: [usize; 3],
    pub units: String,
}
