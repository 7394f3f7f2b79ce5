use crate::error::{Error, Result};

pub const DEFAULT_DUAL_STEP: f64 = 1e-3;

/// Lagrange multiplier `η` on the budget constraint, updated by projected ascent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualController {
    eta: f64,
    pub step: f64,
    pub r_max: f64,
}

impl DualController {
    pub fn new(r_max: f64, step: f64) -> Result<Self> {
        Self::with_eta(r_max, step, 0.0)
    }

    pub fn with_eta(r_max: f64, step: f64, eta: f64) -> Result<Self> {
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("R_max must be positive, got {r_max}")));
        }
        if !(step >= 0.0 && eta >= 0.0 && step.is_finite() && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("dual step {step} / eta {eta}")));
        }
        Ok(Self { eta, step, r_max })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `η ← max(0, η + ρ (R_tot - R_max))`.
    pub fn update(&mut self, r_tot: f64) -> f64 {
        self.eta = (self.eta + self.step * (r_tot - self.r_max)).max(0.0);
        self.eta
    }

    /// `r = U - η (R_tot - R_max)`.
    pub fn reward(&self, utility: f64, r_tot: f64) -> f64 {
        utility - self.eta * (r_tot - self.r_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projected_updates() {
        let mut d = DualController::new(1000.0, 1e-3).unwrap();
        d.update(900.0);
        assert_eq!(d.eta(), 0.0);
        let mut d = DualController::with_eta(1000.0, 1e-3, 1e-3).unwrap();
        assert_eq!(d.update(1050.0), 1e-3 + 1e-3 * 50.0);
        assert!((d.eta() - 0.051).abs() < 1e-15);
        let mut d = DualController::with_eta(1000.0, 1e-3, 0.01).unwrap();
        assert_eq!(d.update(980.0), 0.0);
    }

    #[test]
    fn lagrangian_reward() {
        let d = DualController::with_eta(1000.0, 1e-3, 1e-3).unwrap();
        assert!((d.reward(-0.5, 1200.0) - -0.7).abs() < 1e-15);
        assert_eq!(d.reward(0.0, 1000.0), 0.0);
        assert!(DualController::new(0.0, 1e-3).is_err());
        assert!(DualController::with_eta(1.0, 1e-3, -1.0).is_err());
    }
}
