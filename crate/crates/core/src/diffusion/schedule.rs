use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_STEPS: usize = 50;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal levels `ᾱ_0 = 1 > ᾱ_1 > ... > ᾱ_N` of a cosine schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for VarianceSchedule {
    fn default() -> Self {
        Self::cosine(DEFAULT_STEPS).expect("default schedule")
    }
}

impl VarianceSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let f = |n: usize| {
            let t = (n as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for n in 1..=steps {
            let beta = (1.0 - f(n) / f(n - 1)).clamp(0.0, MAX_BETA);
            alpha_bar.push(alpha_bar[n - 1] * (1.0 - beta));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step noise rate `β_n = 1 - ᾱ_n / ᾱ_{n-1}`.
    pub fn beta(&self, n: usize) -> f64 {
        1.0 - self.alpha_bar[n] / self.alpha_bar[n - 1]
    }

    fn check(&self, n: usize) -> Result<()> {
        if n > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {n} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `x_n = √ᾱ_n x₀ + √(1 - ᾱ_n) ε`.
pub fn forward_diffuse(x0: &Tensor, n: usize, eps: &Tensor, schedule: &VarianceSchedule) -> Result<Tensor> {
    schedule.check(n)?;
    diffuse_with(x0, eps, schedule.alpha_bar(n))
}

pub(crate) fn diffuse_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "forward_diffuse",
            shapes: vec![x0.shape().to_vec(), eps.shape().to_vec()],
        });
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape(), data)
}
