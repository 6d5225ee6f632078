//! Self-similarity descriptors are unchanged by a global intensity scale,
//! which is what lets CT be compared against MRI.

use spinesim::deform::{mind_descriptors, similarity_s, MindParams};
use spinesim::phantom::{Phantom, PhantomParams};
use spinesim::Volume;

fn main() -> spinesim::Result<()> {
    let p = Phantom::generate(&PhantomParams { size: 32, ..Default::default() })?;
    let params = MindParams::default();
    let a = mind_descriptors(&p.ct, &params)?;
    let scaled = Volume::new(p.ct.geometry().clone(), p.ct.data().iter().map(|v| v * 2.5).collect())?;
    let b = mind_descriptors(&scaled, &params)?;
    let max_diff = a
        .channels()
        .iter()
        .zip(b.channels())
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0f32, f32::max);
    println!("max |MIND(v) - MIND(2.5 v)| = {max_diff:e}");
    println!("S(ct, ct)       = {}", similarity_s(&a, &a)?);
    println!("S(ct, 2.5 ct)   = {}", similarity_s(&a, &b)?);
    Ok(())
}
