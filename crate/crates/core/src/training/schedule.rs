use crate::error::{Error, Result};

/// Linear warmup over the first `warmup_fraction` of steps, then cosine decay
/// from `base_lr` to `min_lr_ratio · base_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} beyond the schedule's {} steps",
                self.total_steps
            )));
        }
        let warm = self.warmup_steps();
        let min_lr = self.min_lr_ratio * self.base_lr;
        if step < warm {
            return Ok(self.base_lr * step as f64 / warm as f64);
        }
        let span = self.total_steps - warm;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - warm) as f64 / span as f64;
        Ok(min_lr + (self.base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            base_lr: 2e-4,
            min_lr_ratio: 0.1,
            warmup_fraction: 0.05,
            total_steps: 1000,
        }
    }

    #[test]
    fn examples() {
        let s = sched();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(50).unwrap() - 2e-4).abs() < 1e-18);
        assert!((s.lr_at(1000).unwrap() - 2e-5).abs() < 1e-18);
        // halfway through the decay the cosine term is zero
        assert!((s.lr_at(525).unwrap() - (2e-4 + 2e-5) / 2.0).abs() < 1e-15);
        assert!(s.lr_at(1001).is_err());
    }

    #[test]
    fn continuous_at_the_warmup_junction() {
        let s = sched();
        let before = s.lr_at(49).unwrap();
        let at = s.lr_at(50).unwrap();
        let after = s.lr_at(51).unwrap();
        assert!((at - 2e-4).abs() < 1e-18);
        assert!((at - before) < 2e-4 / 50.0 + 1e-18 && (at - after) < 1e-8);
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        let s = LrSchedule {
            warmup_fraction: 0.0,
            ..sched()
        };
        assert_eq!(s.lr_at(0).unwrap(), 2e-4);
    }
}
