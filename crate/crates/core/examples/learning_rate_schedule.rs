//! Prints the piecewise-decay learning rate over the 250 iterations.

use spinesim::deform::{pwd_learning_rate, SCHEDULE_LAST_STEP};

fn main() -> spinesim::Result<()> {
    for s in (0..=SCHEDULE_LAST_STEP).step_by(10) {
        let eta = pwd_learning_rate(s)?;
        println!("{s:>4} {eta:>9.4} {}", "#".repeat((eta * 4.0).ceil() as usize));
    }
    Ok(())
}
