/// Linear warmup from 0 to `peak`, then cosine decay to `min` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak: f64,
    pub min: f64,
}

impl Schedule {
    /// Learning rate at `step`; fractional steps interpolate the same curve.
    pub fn lr_at(&self, step: f64) -> f64 {
        let w = self.warmup_steps as f64;
        if step < w {
            return self.peak * step / w;
        }
        let span = (self.total_steps.saturating_sub(1) as f64 - w).max(0.0);
        let t = if span == 0.0 { 1.0 } else { ((step - w) / span).clamp(0.0, 1.0) };
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: Schedule = Schedule {
        warmup_steps: 10,
        total_steps: 111,
        peak: 1e-3,
        min: 1e-6,
    };

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(S.lr_at(0.0), 0.0);
        assert!((S.lr_at(110.0) - 1e-6).abs() < 1e-15);
        assert!((S.lr_at(60.0) - (1e-3 + 1e-6) / 2.0).abs() < 1e-9);
        assert!((S.lr_at(5.0) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let eps = 1e-9;
        assert!((S.lr_at(10.0 - eps) - S.lr_at(10.0)).abs() < 1e-9);
        assert!((S.lr_at(10.0) - S.peak).abs() < 1e-15);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = Schedule { warmup_steps: 0, ..S };
        assert_eq!(s.lr_at(0.0), s.peak);
    }
}
