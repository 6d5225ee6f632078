//! A short headless rehearsal: burr from the back through the lamina toward
//! the canal, watching the proximity alarm, then undo.

use spinesim::fusion::label_centroids;
use spinesim::phantom::{Phantom, PhantomParams};
use spinesim::sim::{CarveCommand, SessionConfig, SimSession, Tool};
use spinesim::StructureId;

fn main() -> spinesim::Result<()> {
    let p = Phantom::generate(&PhantomParams { size: 48, ..Default::default() })?;
    let mut s = SimSession::new(&p.truth_seg, SessionConfig::default())?;
    s.auto_exposure(&[StructureId::L3])?;

    // world +y is anterior, so the approach runs along +y from the back
    let levels = [StructureId::L3].into_iter().collect();
    let c = label_centroids(s.grid(), &levels).get(StructureId::L3).expect("L3 present");
    let x = [c[0], 0.0, c[2]];
    let mut seq = 0;
    for step in 0..16 {
        let y = 2.0 + 1.5 * step as f64;
        seq += 1;
        let r = s.apply_carve(&CarveCommand {
            seq,
            tool: Tool::burr(1.5),
            tip: [x[0], y, x[2]],
            direction: [0.0, 1.0, 0.0],
            active: true,
        })?;
        println!(
            "y={y:>6.1} removed={:>3} alarm={:?} {:.2} mm {} chunks{}",
            r.removed_total(),
            r.alarm.level,
            r.alarm.distance(),
            r.dirty_chunks.len(),
            if r.violation { " VIOLATION" } else { "" }
        );
    }
    println!("{}", serde_json::to_string_pretty(&s.decompression_report()).unwrap());
    while s.undo().is_some() {}
    println!("after undo-all: grid equals model = {}", s.grid().data() == p.truth_seg.data());
    Ok(())
}
