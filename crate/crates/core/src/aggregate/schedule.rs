use crate::error::{Error, Result};

/// Margin keeping a scheduled threshold strictly inside `(0, 0.5)`.
const EDGE: f64 = 1e-6;

/// Linear low-frequency threshold schedule from `r0` at epoch 0 to `r1` at
/// epoch `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    pub r0: f64,
    pub r1: f64,
    pub total_epochs: usize,
}

impl ScheduleParams {
    pub const DEFAULT_R0: f64 = 0.35;
    pub const DEFAULT_R1: f64 = 0.48;

    pub fn new(r0: f64, r1: f64, total_epochs: usize) -> Result<Self> {
        let p = Self {
            r0,
            r1,
            total_epochs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0 && self.r0 <= self.r1 && self.r1 < 0.5) {
            return Err(Error::Config(format!(
                "threshold schedule needs 0 < r0 <= r1 < 0.5, got r0={} r1={}",
                self.r0, self.r1
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Threshold after `epoch` local epochs.
pub fn schedule_r(epoch: usize, p: &ScheduleParams) -> Result<f64> {
    if epoch > p.total_epochs {
        return Err(Error::InvalidEpoch {
            epoch,
            total: p.total_epochs,
        });
    }
    let f = epoch as f64 / p.total_epochs as f64;
    // Interpolating as a convex combination hits both endpoints exactly.
    let r = p.r0 * (1.0 - f) + p.r1 * f;
    Ok(r.clamp(EDGE, 0.5 - EDGE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let p = ScheduleParams::new(0.35, 0.48, 250).unwrap();
        assert_eq!(schedule_r(0, &p).unwrap(), 0.35);
        assert_eq!(schedule_r(250, &p).unwrap(), 0.48);
        assert!((schedule_r(125, &p).unwrap() - 0.415).abs() < 1e-15);
        assert!(matches!(schedule_r(251, &p), Err(Error::InvalidEpoch { .. })));
    }

    #[test]
    fn non_decreasing() {
        let p = ScheduleParams::new(0.1, 0.45, 97).unwrap();
        let rs: Vec<f64> = (0..=97).map(|t| schedule_r(t, &p).unwrap()).collect();
        assert!(rs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(ScheduleParams::new(0.0, 0.3, 10).is_err());
        assert!(ScheduleParams::new(0.4, 0.3, 10).is_err());
        assert!(ScheduleParams::new(0.3, 0.5, 10).is_err());
        assert!(ScheduleParams::new(0.3, 0.4, 0).is_err());
    }
}
