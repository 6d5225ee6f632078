//! The whole model-construction pipeline on a phantom case directory.
//!
//!     cargo run --release --example run_pipeline -- /tmp/case /tmp/out

use spinesim::config::PipelineConfig;
use spinesim::phantom::{Phantom, PhantomParams};
use spinesim::pipeline::{run_pipeline, CaseFiles};

fn main() -> spinesim::Result<()> {
    let mut args = std::env::args().skip(1);
    let case = args.next().unwrap_or_else(|| "pipeline_case".into());
    let out = args.next().unwrap_or_else(|| "pipeline_out".into());
    if CaseFiles::from_dir(&case).is_err() {
        Phantom::generate(&PhantomParams { size: 48, ..Default::default() })?.write_case(&case)?;
    }
    let run = run_pipeline(&CaseFiles::from_dir(&case)?, &out, &PipelineConfig::default())?;
    for (stage, secs) in &run.report.timings.stages {
        println!("{stage:>20} {secs:>7.2} s");
    }
    for (k, v) in &run.report.metrics.extra {
        println!("{k:>24} {v:.4}");
    }
    for (name, path) in run.artifacts.existing() {
        println!("{name:>16} {}", path.display());
    }
    Ok(())
}
