//! NIfTI-1 (`.nii`, `.nii.gz`) reading and writing, plus the label-table sidecar.
//!
//! Intensities are always handled as `f32`; label maps are written as
//! `uint16` with a JSON sidecar next to the image:
//! `{ "labels": { "24": "L5", "200": "spinal_cord" } }`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Quaternion, UnitQuaternion};
use ndarray::{Array, IxDyn, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMap, Volume};

const INTENT_VECTOR: i16 = 1007;
const XFORM_SCANNER: i16 = 1;
const UNITS_MM: u8 = 2;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    labels: BTreeMap<String, String>,
}

/// `ct.nii.gz` -> `ct.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    path.with_file_name(format!("{stem}.json"))
}

struct RawImage {
    header: NiftiHeader,
    data: Array<f64, IxDyn>,
}

fn map_nifti_err(path: &Path, err: nifti::NiftiError) -> Error {
    use nifti::NiftiError as N;
    match err {
        N::Io(e) if e.kind() == std::io::ErrorKind::NotFound || e.kind() == std::io::ErrorKind::PermissionDenied => {
            Error::io(path, e)
        }
        N::Io(e) => Error::CorruptHeader {
            path: path.into(),
            reason: e.to_string(),
        },
        N::UnsupportedDataType(t) => Error::UnsupportedDatatype(format!("{t:?}")),
        N::InvalidTypeConversion(t, _) => Error::UnsupportedDatatype(format!("{t:?}")),
        other => Error::CorruptHeader {
            path: path.into(),
            reason: other.to_string(),
        },
    }
}

fn read_raw(path: &Path) -> Result<RawImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| map_nifti_err(path, e))?;
    let header = obj.header().clone();
    let data = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| map_nifti_err(path, e))?;
    Ok(RawImage { header, data })
}

fn header_affine(h: &NiftiHeader) -> Matrix4<f64> {
    if h.sform_code > 0 {
        let mut m = Matrix4::identity();
        for c in 0..4 {
            m[(0, c)] = h.srow_x[c] as f64;
            m[(1, c)] = h.srow_y[c] as f64;
            m[(2, c)] = h.srow_z[c] as f64;
        }
        return m;
    }
    let pix = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64];
    let pix = pix.map(|p| if p > 0.0 { p } else { 1.0 });
    let mut m = Matrix4::identity();
    if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(a, b, c, d)).to_rotation_matrix();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..3 {
            m[(r, 0)] = rot[(r, 0)] * pix[0];
            m[(r, 1)] = rot[(r, 1)] * pix[1];
            m[(r, 2)] = rot[(r, 2)] * pix[2] * qfac;
        }
        m[(0, 3)] = h.quatern_x as f64;
        m[(1, 3)] = h.quatern_y as f64;
        m[(2, 3)] = h.quatern_z as f64;
    } else {
        for a in 0..3 {
            m[(a, a)] = pix[a];
        }
    }
    m
}

fn spatial_geometry(path: &Path, h: &NiftiHeader) -> Result<Geometry> {
    let ndim = h.dim[0] as usize;
    if !(1..=7).contains(&ndim) {
        return Err(Error::CorruptHeader {
            path: path.into(),
            reason: format!("dim[0] = {ndim}"),
        });
    }
    let dim = |a: usize| if a <= ndim { h.dim[a] as usize } else { 1 };
    Geometry::new([dim(1), dim(2), dim(3)], header_affine(h))
}

/// x-fastest flattening of the first three axes of channel `c` (axis 4 or 5).
fn flatten_channel(data: &Array<f64, IxDyn>, channel: usize, channel_axis: Option<usize>) -> Vec<f64> {
    let shape = data.shape();
    let (nx, ny, nz) = (
        shape[0],
        *shape.get(1).unwrap_or(&1),
        *shape.get(2).unwrap_or(&1),
    );
    let mut out = Vec::with_capacity(nx * ny * nz);
    let mut idx = vec![0usize; shape.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                idx[0] = x;
                if shape.len() > 1 {
                    idx[1] = y;
                }
                if shape.len() > 2 {
                    idx[2] = z;
                }
                if let Some(ax) = channel_axis {
                    idx[ax] = channel;
                }
                out.push(data[IxDyn(&idx)]);
            }
        }
    }
    out
}

fn ensure_3d(path: &Path, h: &NiftiHeader) -> Result<()> {
    let ndim = h.dim[0] as usize;
    if (4..=7).contains(&ndim) && (4..=ndim).any(|a| h.dim[a] > 1) {
        return Err(Error::UnsupportedDatatype(format!(
            "{}: {}-D image; only 3-D volumes are supported",
            path.display(),
            ndim
        )));
    }
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    ensure_3d(path, &raw.header)?;
    let geometry = spatial_geometry(path, &raw.header)?;
    let data = flatten_channel(&raw.data, 0, None).into_iter().map(|v| v as f32).collect();
    Volume::new(geometry, data)
}

/// Loads integer labels; the sidecar table is used when present, otherwise
/// canonical structure names are assumed.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    ensure_3d(path, &raw.header)?;
    let geometry = spatial_geometry(path, &raw.header)?;
    let mut data = Vec::with_capacity(geometry.len());
    for v in flatten_channel(&raw.data, 0, None) {
        let r = v.round();
        if !(0.0..=u16::MAX as f64).contains(&r) || (v - r).abs() > 1e-3 {
            return Err(Error::UnsupportedDatatype(format!(
                "{}: value {v} is not a valid label",
                path.display()
            )));
        }
        data.push(r as u16);
    }
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let parsed: Sidecar = serde_json::from_str(&text)?;
        let mut table = BTreeMap::new();
        for (k, v) in parsed.labels {
            let label: u16 = k
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("sidecar label key {k:?} is not an integer")))?;
            table.insert(label, v);
        }
        LabelMap::new(geometry, data, table)
    } else {
        LabelMap::with_canonical_table(geometry, data)
    }
}

fn base_header(geometry: &Geometry) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    let m = geometry.index_to_world();
    for c in 0..4 {
        h.srow_x[c] = m[(0, c)] as f32;
        h.srow_y[c] = m[(1, c)] as f32;
        h.srow_z[c] = m[(2, c)] as f32;
    }
    h.sform_code = XFORM_SCANNER;
    h.qform_code = 0;
    let sp = geometry.spacing();
    h.pixdim = [1.0, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    h.xyzt_units = UNITS_MM;
    h
}

fn write_array<T>(path: &Path, header: &NiftiHeader, arr: &Array<T, IxDyn>) -> Result<()>
where
    T: nifti::DataElement + bytemuck::Pod,
{
    WriterOptions::new(path)
        .reference_header(header)
        .write_nifti(arr)
        .map_err(|e| match e {
            nifti::NiftiError::Io(io) => Error::io(path, io),
            other => Error::InvalidArgument(other.to_string()),
        })
}

fn check_writable(path: &Path) -> Result<()> {
    let name = path.to_string_lossy();
    if !(name.ends_with(".nii") || name.ends_with(".nii.gz")) {
        return Err(Error::InvalidArgument(format!(
            "{}: output must end in .nii or .nii.gz",
            path.display()
        )));
    }
    Ok(())
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_writable(path)?;
    let [nx, ny, nz] = volume.geometry().dims();
    let arr = Array::from_shape_vec(IxDyn(&[nx, ny, nz]).f(), volume.data().to_vec())
        .expect("dims checked at construction");
    write_array(path, &base_header(volume.geometry()), &arr)
}

pub fn save_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_writable(path)?;
    let [nx, ny, nz] = labels.geometry().dims();
    let arr = Array::from_shape_vec(IxDyn(&[nx, ny, nz]).f(), labels.data().to_vec())
        .expect("dims checked at construction");
    write_array(path, &base_header(labels.geometry()), &arr)?;
    let sidecar = Sidecar {
        labels: labels
            .label_table()
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    };
    let sidecar_file = sidecar_path(path);
    fs::write(&sidecar_file, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&sidecar_file, e))
}

/// Writes a 3-component vector image (`dim = [nx, ny, nz, 1, 3]`, vector intent).
pub fn save_vector_field(geometry: &Geometry, components: &[Vec<f32>; 3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_writable(path)?;
    let [nx, ny, nz] = geometry.dims();
    let mut flat = Vec::with_capacity(geometry.len() * 3);
    for c in components {
        if c.len() != geometry.len() {
            return Err(Error::InvalidArgument("vector component length mismatch".into()));
        }
        flat.extend_from_slice(c);
    }
    let arr = Array::from_shape_vec(IxDyn(&[nx, ny, nz, 1, 3]).f(), flat).expect("length checked");
    let mut header = base_header(geometry);
    header.intent_code = INTENT_VECTOR;
    write_array(path, &header, &arr)
}

pub fn load_vector_field(path: impl AsRef<Path>) -> Result<(Geometry, [Vec<f32>; 3])> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let h = &raw.header;
    if h.dim[0] != 5 || h.dim[4] != 1 || h.dim[5] != 3 {
        return Err(Error::UnsupportedDatatype(format!(
            "{}: expected a 3-component vector image, dim = {:?}",
            path.display(),
            h.dim
        )));
    }
    let geometry = spatial_geometry(path, h)?;
    let comp = |c: usize| -> Vec<f32> {
        flatten_channel(&raw.data, c, Some(4)).into_iter().map(|v| v as f32).collect()
    };
    let out = [comp(0), comp(1), comp(2)];
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{}: displacement field", path.display())));
    }
    Ok((geometry, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oblique_geometry(dims: [usize; 3]) -> Geometry {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 0.75;
        m[(0, 1)] = 0.125;
        m[(1, 1)] = -0.5;
        m[(2, 2)] = 2.0;
        m[(0, 3)] = -12.5;
        m[(1, 3)] = 30.25;
        m[(2, 3)] = 4.0;
        Geometry::new(dims, m).unwrap()
    }

    #[test]
    fn four_cubed_identity_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let v = Volume::from_fn(Geometry::identity([4, 4, 4]), |[x, y, z]| (x + 4 * y + 16 * z) as f32);
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.data().len(), 64);
        assert_eq!(back, v);
    }

    #[test]
    fn two_mm_spacing_extent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii.gz");
        let g = Geometry::with_spacing([5, 6, 7], [2.0, 2.0, 2.0]).unwrap();
        save_volume(&Volume::filled(g, 1.0), &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.geometry().spacing(), [2.0, 2.0, 2.0]);
        let far = back.geometry().voxel_to_world([5.0, 6.0, 7.0]);
        assert_eq!(far, [10.0, 12.0, 14.0]);
    }

    #[test]
    fn truncated_file_is_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        save_volume(&Volume::filled(Geometry::identity([4, 4, 4]), 1.0), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..100]).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("corrupt header"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_volume("/nonexistent/x.nii"), Err(Error::Io { .. })));
    }

    #[test]
    fn random_label_map_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.nii.gz");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = oblique_geometry([9, 7, 5]);
        let choices = [0u16, 22, 23, 24, 26, 123, 200, 201];
        let data = (0..g.len()).map(|_| choices[rng.gen_range(0..choices.len())]).collect();
        let lm = LabelMap::with_canonical_table(g, data).unwrap();
        save_label_map(&lm, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = load_label_map(&path).unwrap();
        assert_eq!(back.data(), lm.data());
        assert_eq!(back.label_table(), lm.label_table());
        assert!(back.geometry().matches(lm.geometry(), 1e-5));
    }

    #[test]
    fn volume_round_trip_is_lossless_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ct.nii");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = oblique_geometry([6, 5, 4]);
        let data = (0..g.len()).map(|_| rng.gen_range(-1000.0f32..3000.0)).collect();
        let v = Volume::new(g, data).unwrap();
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        let max_diff = back
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(max_diff, 0.0);
        assert!(back.geometry().matches(v.geometry(), 1e-5));
    }

    #[test]
    fn unwritable_destination_errors() {
        let v = Volume::filled(Geometry::identity([2, 2, 2]), 0.0);
        assert!(save_volume(&v, "/proc/definitely/not/here.nii").is_err());
    }

    #[test]
    fn sidecar_names_follow_image_stem() {
        assert_eq!(sidecar_path(Path::new("/a/ct_seg.nii.gz")), PathBuf::from("/a/ct_seg.json"));
        assert_eq!(sidecar_path(Path::new("b.nii")), PathBuf::from("b.json"));
    }

    #[test]
    fn vector_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.nii.gz");
        let g = Geometry::identity([3, 4, 5]);
        let comps = [
            (0..60).map(|i| i as f32).collect::<Vec<_>>(),
            (0..60).map(|i| -(i as f32) * 0.5).collect(),
            vec![0.25; 60],
        ];
        save_vector_field(&g, &comps, &path).unwrap();
        let (g2, back) = load_vector_field(&path).unwrap();
        assert_eq!(g2.dims(), [3, 4, 5]);
        assert_eq!(back, comps);
        // A vector image is not a scalar volume.
        assert!(load_volume(&path).is_err());
    }
}
