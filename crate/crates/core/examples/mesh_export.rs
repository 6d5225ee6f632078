//! Meshes every structure of a label map and writes a binary glTF.
//!
//!     cargo run --example mesh_export -- model.glb

use spinesim::mesh::{build_scene, write_glb, Palette, SmoothParams};
use spinesim::phantom::{Phantom, PhantomParams};

fn main() -> spinesim::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "model.glb".into());
    let p = Phantom::generate(&PhantomParams { size: 48, ..Default::default() })?;
    let scene = build_scene(&p.truth_seg, &Palette::default(), SmoothParams::default())?;
    for m in &scene.meshes {
        println!(
            "{:>18} {:>6} verts {:>6} tris  watertight={} volume={:.0} mm3",
            m.structure.to_string(),
            m.vertices.len(),
            m.triangles.len(),
            m.is_watertight(),
            m.enclosed_volume()
        );
    }
    let bytes = write_glb(&scene)?;
    std::fs::write(&out, &bytes).expect("write glb");
    println!("{} bytes -> {out}", bytes.len());
    Ok(())
}
