/// Converts elapsed wall time into a whole number of fixed steps.
///
/// The step count is `floor(total_elapsed / dt)`, so the simulation depends
/// only on total elapsed time and not on how it was split across calls.
#[derive(Debug, Clone, PartialEq)]
pub struct Stepper {
    dt: f64,
    elapsed: f64,
    steps: u64,
}

/// Absorbs representation error in `elapsed / dt` (e.g. 0.3 / 0.1).
const STEP_TOLERANCE: f64 = 1e-9;

impl Stepper {
    pub fn new(dt: f64) -> Self {
        assert!(dt > 0.0, "step must be positive");
        Stepper {
            dt,
            elapsed: 0.0,
            steps: 0,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    /// Adds `wall_seconds` (negative values count as zero) and returns how
    /// many new steps are due.
    pub fn advance(&mut self, wall_seconds: f64) -> u64 {
        if wall_seconds > 0.0 {
            self.elapsed += wall_seconds;
        }
        let due = (self.elapsed / self.dt + STEP_TOLERANCE).floor() as u64;
        let n = due.saturating_sub(self.steps);
        self.steps += n;
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_steps() {
        let mut s = Stepper::new(0.1);
        assert_eq!(s.advance(0.0), 0);
        assert_eq!(s.advance(1.0), 10);
        let mut s = Stepper::new(0.1);
        assert_eq!(s.advance(0.25), 2);
        assert_eq!(s.advance(0.25), 3);
        assert_eq!(s.steps(), 5);
    }

    #[test]
    fn thirds_do_not_lose_steps() {
        let mut s = Stepper::new(0.1);
        let mut total = 0;
        for _ in 0..3 {
            total += s.advance(0.1);
        }
        assert_eq!(total, 3);
    }
}
