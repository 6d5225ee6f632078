//! Writes a synthetic CT/MRI case with ground truth to a directory.
//!
//!     cargo run --example phantom_case -- /tmp/case 64

use spinesim::phantom::{Phantom, PhantomParams};

fn main() -> spinesim::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "phantom_case".into());
    let size = args.next().map(|s| s.parse().expect("size")).unwrap_or(48);
    let p = Phantom::generate(&PhantomParams { size, ..Default::default() })?;
    p.write_case(&dir)?;
    println!("wrote {size}^3 phantom to {dir}");
    println!("levels in ct_seg: {:?}", p.ct_seg.present_labels());
    println!("landmarks: {}", p.landmarks_fixed.landmarks.len());
    Ok(())
}
