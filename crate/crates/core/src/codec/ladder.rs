use crate::error::{Error, Result};

/// Quantization step multipliers, one per allocation action, coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLadder {
    steps: Vec<f64>,
}

impl Default for StepLadder {
    fn default() -> Self {
        Self {
            steps: vec![4.0, 2.0, 1.0, 0.5, 0.25],
        }
    }
}

impl StepLadder {
    /// Action indices are stored in 3 bits, so at most 8 levels.
    pub const MAX_ACTIONS: usize = 8;

    pub fn new(steps: Vec<f64>) -> Result<Self> {
        if steps.is_empty() || steps.len() > Self::MAX_ACTIONS {
            return Err(Error::InvalidArgument(format!("need 1..=8 steps, got {}", steps.len())));
        }
        if steps.iter().any(|s| !(s.is_finite() && *s > 0.0)) || steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "steps must be positive and strictly decreasing: {steps:?}"
            )));
        }
        Ok(Self { steps })
    }

    /// The first `k` levels of the default ladder.
    pub fn truncated(k: usize) -> Result<Self> {
        let d = Self::default();
        if k == 0 || k > d.steps.len() {
            return Err(Error::InvalidArgument(format!("K = {k} outside 1..=5")));
        }
        Self::new(d.steps[..k].to_vec())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, action: usize) -> f64 {
        self.steps[action]
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }
}
