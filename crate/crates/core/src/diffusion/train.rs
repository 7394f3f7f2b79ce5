use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{timestep_embedding, DenoiserNet};
use super::schedule::{diffuse_with, VarianceSchedule};
use crate::error::{Error, Result};
use crate::imaging::ImagePlane;
use crate::numerics::{Adam, Graph, Tensor};

/// One training pair: a clean image and its dequantized conditioning latent `[1, C, H/4, W/4]`.
#[derive(Clone, Debug)]
pub struct DiffusionSample {
    pub image: ImagePlane,
    pub cond: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    fn window(&self) -> usize {
        (self.losses.len() / 10).clamp(1, 100)
    }

    /// Mean loss over the first tenth of training (at most 100 steps).
    pub fn initial_loss(&self) -> f64 {
        let w = self.window().min(self.losses.len());
        self.losses[..w].iter().sum::<f64>() / w.max(1) as f64
    }

    /// Mean loss over the last tenth of training (at most 100 steps).
    pub fn final_loss(&self) -> f64 {
        let w = self.window().min(self.losses.len());
        self.losses[self.losses.len() - w..].iter().sum::<f64>() / w.max(1) as f64
    }
}

/// One ε-prediction loss evaluation and gradient step.
pub(crate) fn denoiser_loss(
    g: &mut Graph,
    net: &DenoiserNet,
    sample: &DiffusionSample,
    n: usize,
    schedule: &VarianceSchedule,
    rng: &mut impl Rng,
) -> Result<(crate::numerics::Var, Tensor)> {
    let x0 = sample.image.to_tensor();
    let eps = Tensor::randn(x0.shape(), rng);
    let xn = diffuse_with(&x0, &eps, schedule.alpha_bar(n))?;
    let x = g.constant(xn);
    let c = g.constant(sample.cond.clone());
    let t = g.constant(timestep_embedding(&[n]));
    let pred = net.forward(g, x, c, t)?;
    let target = g.constant(eps.clone());
    Ok((g.mse(pred, target)?, eps))
}

/// Continue training `net` on `data`; loss `E‖ε - ε̂(x_n, n, ẑ)‖²`.
pub fn fit_denoiser(
    net: &mut DenoiserNet,
    data: &[DiffusionSample],
    schedule: &VarianceSchedule,
    config: &DenoiserTrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty denoiser training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD1FF);
    let mut opt = Adam::new(config.lr, &net.store);
    let mut report = TrainReport::default();
    for step in 0..config.steps {
        let sample = &data[rng.random_range(0..data.len())];
        let n = rng.random_range(1..=schedule.steps());
        let mut g = Graph::new();
        let (loss, _) = match denoiser_loss(&mut g, net, sample, n, schedule, &mut rng) {
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            other => other?,
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        report.losses.push(value);
        let grads = g.backward(loss)?;
        let grads = g.param_grads(&grads, &net.store);
        match opt.step(&mut net.store, &grads) {
            Err(Error::NonFiniteGradient(_)) => return Err(Error::Diverged { step }),
            other => other?,
        }
    }
    Ok(report)
}

pub fn train_denoiser(
    data: &[DiffusionSample],
    schedule: &VarianceSchedule,
    config: &DenoiserTrainConfig,
) -> Result<(DenoiserNet, TrainReport)> {
    let mut net = DenoiserNet::new(config.seed);
    let report = fit_denoiser(&mut net, data, schedule, config)?;
    Ok((net, report))
}
