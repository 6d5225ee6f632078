//! Dice overlap and landmark error on hand-made inputs.

use spinesim::eval::{dice, tre_with, LandmarkKind, LandmarkSet, NamedLandmark, Space, TreReport};
use spinesim::{Geometry, LabelMap, StructureId};

fn main() -> spinesim::Result<()> {
    let g = Geometry::identity([4, 4, 4]);
    let l4 = StructureId::L4.label();
    let a: Vec<u16> = (0..64).map(|i| if i < 8 { l4 } else { 0 }).collect();
    let b: Vec<u16> = (0..64).map(|i| if (4..12).contains(&i) { l4 } else { 0 }).collect();
    let a = LabelMap::with_canonical_table(g.clone(), a)?;
    let b = LabelMap::with_canonical_table(g, b)?;
    println!("dice(a, b) = {}", dice(&a, &b, l4)?);

    let lm = |space, x: f64| {
        LandmarkSet::new(
            space,
            vec![NamedLandmark {
                level: StructureId::L4,
                kind: LandmarkKind::Spinous,
                position_mm: [x, 0.0, 0.0],
            }],
        )
    };
    let fixed = lm(Space::Fixed, 0.0)?;
    let moving = lm(Space::Moving, 0.0)?;
    let patient = tre_with("demo", &fixed, &moving, |p| Ok([p[0] + 3.0, p[1] + 4.0, p[2]]))?;
    let report = TreReport::from_patients(vec![patient]);
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}
