//! Piecewise-decay learning-rate schedule over 250 iterations: a constant
//! phase, a cosine phase, then a linear ramp down to sub-voxel steps.

use crate::error::{Error, Result};

pub const SCHEDULE_LAST_STEP: usize = 250;

pub fn pwd_learning_rate(s: usize) -> Result<f64> {
    let sf = s as f64;
    match s {
        0..70 => Ok(15.0),
        70..180 => Ok(7.0 * (2.0 * std::f64::consts::PI / 200.0 * (sf - 70.0)).cos() + 8.0),
        180..=SCHEDULE_LAST_STEP => Ok(-1.209 / 70.0 * (sf - 180.0) + 1.343),
        _ => Err(Error::InvalidArgument(format!(
            "iteration {s} outside schedule range 0..={SCHEDULE_LAST_STEP}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_values() {
        assert_eq!(pwd_learning_rate(0).unwrap(), 15.0);
        assert_eq!(pwd_learning_rate(69).unwrap(), 15.0);
        assert_eq!(pwd_learning_rate(70).unwrap(), 15.0);
        assert_eq!(pwd_learning_rate(180).unwrap(), 1.343);
        assert!((pwd_learning_rate(250).unwrap() - 0.134).abs() < 1e-12);
    }

    #[test]
    fn branch_continuity() {
        // Cosine branch evaluated at the 180 boundary.
        let left = 7.0 * (2.0 * std::f64::consts::PI / 200.0 * 110.0).cos() + 8.0;
        assert!((left - 1.343).abs() < 5e-4);
        let before_70 = pwd_learning_rate(69).unwrap();
        assert_eq!(before_70, pwd_learning_rate(70).unwrap());
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(pwd_learning_rate(251).is_err());
    }

    #[test]
    fn cosine_phase_bottoms_out_at_170() {
        assert!((pwd_learning_rate(170).unwrap() - 1.0).abs() < 1e-12);
        assert!(pwd_learning_rate(179).unwrap() > pwd_learning_rate(170).unwrap());
    }
}
