//! Exact Euclidean distance to the neural structures, the field behind the
//! proximity alarm.

use spinesim::edt::distance_transform;
use spinesim::phantom::{Phantom, PhantomParams};
use spinesim::StructureId;

fn main() -> spinesim::Result<()> {
    let p = Phantom::generate(&PhantomParams { size: 48, ..Default::default() })?;
    let lm = &p.truth_seg;
    let neural: Vec<u16> = [StructureId::SPINAL_CORD, StructureId::NERVE_ROOTS, StructureId::CSF]
        .iter()
        .map(|s| s.label())
        .collect();
    let data = lm.data();
    let df = distance_transform(lm.geometry(), |i| neural.contains(&data[i]));
    let g = lm.geometry();
    let [nx, ny, nz] = g.dims();
    // one row through the canal, posterior to anterior
    let (x, z) = (nx / 2, nz / 2);
    for y in (0..ny).step_by(3) {
        let i = g.index(x, y, z);
        println!("y={y:>2} label={:>3} distance={:>6.2} mm", data[i], df.distance[i]);
    }
    Ok(())
}
