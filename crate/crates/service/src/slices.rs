//! PNG rendering of one plane of a volume with an optional label overlay.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use serde::Deserialize;
use spinesim::mesh::Palette;
use spinesim::{LabelMap, StructureId, Volume};

use crate::error::{ApiError, ApiResult};

pub const OVERLAY_ALPHA: f32 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    #[serde(alias = "sagittal")]
    X,
    #[serde(alias = "coronal")]
    Y,
    #[serde(alias = "axial")]
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Ct,
    Mri,
}

#[derive(Clone, Debug, Deserialize)]
pub struct SliceQuery {
    pub axis: Axis,
    pub index: usize,
    #[serde(default)]
    pub overlay: bool,
    #[serde(default)]
    pub modality: Modality,
}

/// Plane of `volume` normal to `axis`. Image columns follow the first
/// remaining axis, rows the second, flipped so larger coordinates are up.
pub fn render(volume: &Volume, labels: Option<&LabelMap>, axis: Axis, index: usize) -> ApiResult<Vec<u8>> {
    let dims = volume.geometry().dims();
    let a = axis.index();
    if index >= dims[a] {
        return Err(ApiError::BadRequest(format!(
            "index {index} out of range for axis with {} slices",
            dims[a]
        )));
    }
    let (u, v) = match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (lo, hi) = volume
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let palette = Palette::default();
    let (w, h) = (dims[u] as u32, dims[v] as u32);
    let mut img = RgbImage::new(w, h);
    for row in 0..h {
        for col in 0..w {
            let mut p = [0usize; 3];
            p[a] = index;
            p[u] = col as usize;
            p[v] = (h - 1 - row) as usize;
            let g = volume.get(p[0], p[1], p[2]);
            let gray = ((g - lo) / span * 255.0).round().clamp(0.0, 255.0);
            let mut px = [gray; 3];
            if let Some(lm) = labels {
                let l = lm.get(p[0], p[1], p[2]);
                if l != 0 {
                    let c = StructureId::from_label(l).map(|s| palette.color(s)).unwrap_or([1.0, 1.0, 0.0, 1.0]);
                    for k in 0..3 {
                        px[k] = (1.0 - OVERLAY_ALPHA) * px[k] + OVERLAY_ALPHA * c[k] * 255.0;
                    }
                }
            }
            img.put_pixel(col, row, Rgb(px.map(|x| x.round() as u8)));
        }
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(out.into_inner())
}
