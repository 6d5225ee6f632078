//! Voxel-wise union of two vertebral segmentations. The secondary map
//! contributes the sacrum, which the primary lacks.

use spinesim::fusion::{fuse_union, largest_component, FusionPolicy};
use spinesim::phantom::{Phantom, PhantomParams};
use spinesim::StructureId;

fn main() -> spinesim::Result<()> {
    let p = Phantom::generate(&PhantomParams { size: 32, ..Default::default() })?;
    let fused = fuse_union(&p.ct_seg, &p.ct_seg_secondary, &FusionPolicy::default())?;
    let sacrum = StructureId::SACRUM.label();
    println!("primary nonzero   {}", p.ct_seg.nonzero_count());
    println!("secondary nonzero {}", p.ct_seg_secondary.nonzero_count());
    println!("fused nonzero     {}", fused.nonzero_count());
    println!("sacrum voxels: primary {} fused {}", p.ct_seg.count(sacrum), fused.count(sacrum));

    let l3 = StructureId::L3.label();
    let cleaned = largest_component(&fused, l3);
    println!("L3 after component cleanup: {} -> {}", fused.count(l3), cleaned.count(l3));
    Ok(())
}
