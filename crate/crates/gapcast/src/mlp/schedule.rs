/// Triangular cyclic learning-rate schedule.
///
/// The rate climbs linearly from `lo` to `hi` over the first half of a period
/// and back down over the second half. Deterministic given the step counter.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CyclicLr {
    pub lo: f64,
    pub hi: f64,
    pub period: u64,
}

impl CyclicLr {
    pub fn new(lo: f64, hi: f64, period: u64) -> Self {
        assert!(lo > 0.0 && hi >= lo && period >= 2);
        Self { lo, hi, period }
    }

    pub fn at(&self, step: u64) -> f64 {
        let phase = (step % self.period) as f64 / self.period as f64;
        let tri = 1.0 - (2.0 * phase - 1.0).abs();
        self.lo + (self.hi - self.lo) * tri
    }
}

impl Default for CyclicLr {
    /// Bounds anchored at a 1e-3 peak rate, one cycle per 100 epochs.
    fn default() -> Self {
        Self { lo: 1e-4, hi: 1e-3, period: 100 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stays_within_bounds_and_is_periodic() {
        let s = CyclicLr::default();
        for step in 0..500 {
            let lr = s.at(step);
            assert!(lr >= s.lo - 1e-15 && lr <= s.hi + 1e-15);
            assert_eq!(s.at(step).to_bits(), s.at(step + 100).to_bits());
        }
        // Peak at mid-period, trough at period boundaries.
        assert!((s.at(50) - 1e-3).abs() < 1e-12);
        assert!((s.at(0) - 1e-4).abs() < 1e-12);
    }
}
