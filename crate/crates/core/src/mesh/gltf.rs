//! Minimal glTF 2.0 binary writer: one node and mesh per structure,
//! positions (f32, mm) and u32 indices in a single buffer.

use std::path::Path;

use serde_json::{json, Value};

use super::ModelScene;
use crate::error::{Error, Result};

const GLB_MAGIC: u32 = 0x4654_6C67;
const CHUNK_JSON: u32 = 0x4E4F_534A;
const CHUNK_BIN: u32 = 0x004E_4942;
const ARRAY_BUFFER: u32 = 34962;
const ELEMENT_ARRAY_BUFFER: u32 = 34963;
const FLOAT: u32 = 5126;
const UNSIGNED_INT: u32 = 5125;

fn pad_to_4(buf: &mut Vec<u8>, byte: u8) {
    while buf.len() % 4 != 0 {
        buf.push(byte);
    }
}

/// Serializes the scene to GLB bytes. Output depends only on the scene.
pub fn write_glb(scene: &ModelScene) -> Result<Vec<u8>> {
    let meshes: Vec<_> = scene.meshes.iter().filter(|m| !m.is_empty()).collect();
    if meshes.is_empty() {
        return Err(Error::NothingToExport);
    }
    let mut bin: Vec<u8> = Vec::new();
    let mut buffer_views = Vec::new();
    let mut accessors = Vec::new();
    let mut gl_meshes = Vec::new();
    let mut materials = Vec::new();
    let mut nodes = Vec::new();

    for (i, m) in meshes.iter().enumerate() {
        let mut min = [f32::INFINITY; 3];
        let mut max = [f32::NEG_INFINITY; 3];
        let pos_offset = bin.len();
        for v in &m.vertices {
            for a in 0..3 {
                let x = v[a] as f32;
                min[a] = min[a].min(x);
                max[a] = max[a].max(x);
                bin.extend_from_slice(&x.to_le_bytes());
            }
        }
        let pos_len = bin.len() - pos_offset;
        let idx_offset = bin.len();
        for t in &m.triangles {
            for &k in t {
                bin.extend_from_slice(&k.to_le_bytes());
            }
        }
        let idx_len = bin.len() - idx_offset;

        buffer_views.push(json!({"buffer": 0, "byteOffset": pos_offset, "byteLength": pos_len, "target": ARRAY_BUFFER}));
        buffer_views.push(json!({"buffer": 0, "byteOffset": idx_offset, "byteLength": idx_len, "target": ELEMENT_ARRAY_BUFFER}));
        accessors.push(json!({
            "bufferView": 2 * i,
            "componentType": FLOAT,
            "count": m.vertices.len(),
            "type": "VEC3",
            "min": min,
            "max": max,
        }));
        accessors.push(json!({
            "bufferView": 2 * i + 1,
            "componentType": UNSIGNED_INT,
            "count": m.triangles.len() * 3,
            "type": "SCALAR",
        }));
        materials.push(json!({
            "name": m.structure.to_string(),
            "pbrMetallicRoughness": {"baseColorFactor": m.color, "metallicFactor": 0.0, "roughnessFactor": 0.8},
            "alphaMode": if m.color[3] < 1.0 { "BLEND" } else { "OPAQUE" },
            "doubleSided": false,
        }));
        gl_meshes.push(json!({
            "name": m.structure.to_string(),
            "primitives": [{"attributes": {"POSITION": 2 * i}, "indices": 2 * i + 1, "material": i, "mode": 4}],
        }));
        let visible = scene.visibility.get(&m.structure).copied().unwrap_or(true);
        nodes.push(json!({
            "name": m.structure.to_string(),
            "mesh": i,
            "extras": {"label": m.structure.label(), "visible": visible},
        }));
    }

    let doc: Value = json!({
        "asset": {"version": "2.0", "generator": "spinesim"},
        "scene": 0,
        "scenes": [{"name": "model", "nodes": (0..nodes.len()).collect::<Vec<_>>()}],
        "nodes": nodes,
        "meshes": gl_meshes,
        "materials": materials,
        "accessors": accessors,
        "bufferViews": buffer_views,
        "buffers": [{"byteLength": bin.len()}],
    });
    let mut json_bytes = serde_json::to_vec(&doc)?;
    pad_to_4(&mut json_bytes, b' ');
    pad_to_4(&mut bin, 0);

    let total = 12 + 8 + json_bytes.len() + 8 + bin.len();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&GLB_MAGIC.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(total as u32).to_le_bytes());
    out.extend_from_slice(&(json_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&CHUNK_JSON.to_le_bytes());
    out.extend_from_slice(&json_bytes);
    out.extend_from_slice(&(bin.len() as u32).to_le_bytes());
    out.extend_from_slice(&CHUNK_BIN.to_le_bytes());
    out.extend_from_slice(&bin);
    Ok(out)
}

pub fn export_gltf(scene: &ModelScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_glb(scene)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
