//! Landmark-based similarity transform from vertebral centroids.

use spinesim::phantom::{Phantom, PhantomParams};
use spinesim::pipeline::{estimate_affine, fuse_segmentations};
use spinesim::similarity::residuals;

fn main() -> spinesim::Result<()> {
    let p = Phantom::generate(&PhantomParams::default())?;
    let fixed = fuse_segmentations(&p.ct_seg, Some(&p.ct_seg_secondary), &Default::default())?;
    let (t, pairs) = estimate_affine(&fixed, &p.mri_seg)?;
    for (pair, r) in pairs.pairs.iter().zip(residuals(&t, &pairs)) {
        println!("{:>7}  residual {r:.3} mm", pair.level.to_string());
    }
    println!("scale {:.4}", t.scale());
    println!("translation {:?}", t.translation().as_slice());
    println!("{}", serde_json::to_string_pretty(&t).unwrap());
    Ok(())
}
