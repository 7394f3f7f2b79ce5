use super::policy::{states_tensor, PolicyNet, ValueNet};
use super::state::AllocationState;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    /// Clip parameter `γ`.
    pub clip: f64,
    /// Entropy weight `κ`.
    pub entropy_weight: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Update epochs per image `M`.
    pub epochs: usize,
    /// Episodes per epoch `E`.
    pub episodes: usize,
    /// Gradient steps over each epoch's batch.
    pub inner_iterations: usize,
    /// Dual step `ρ`.
    pub dual_step: f64,
    pub normalize_advantages: bool,
    pub masking: bool,
    pub reset_per_image: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            entropy_weight: 0.01,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            epochs: 8,
            episodes: 4,
            inner_iterations: 4,
            dual_step: super::dual::DEFAULT_DUAL_STEP,
            normalize_advantages: false,
            masking: true,
            reset_per_image: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::InvalidArgument(format!("clip {} outside (0, 1)", self.clip)));
        }
        if !(self.entropy_weight >= 0.0 && self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.dual_step >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad PPO hyperparameters: {self:?}")));
        }
        if self.episodes == 0 {
            return Err(Error::InvalidArgument("episodes per epoch must be at least 1".into()));
        }
        Ok(())
    }
}

/// One decision inside an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: AllocationState,
    pub action: usize,
    pub log_prob: f64,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub reward: f64,
    /// `G_b = r` for every step.
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, reward: f64) -> Self {
        let n = steps.len();
        Self {
            steps,
            reward,
            returns: vec![reward; n],
            advantages: vec![0.0; n],
        }
    }

    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

/// `A_b = G_b - V(s_b)`.
pub fn advantages(returns: &[f64], values: &[f64]) -> Vec<f64> {
    returns.iter().zip(values).map(|(g, v)| g - v).collect()
}

/// `min(ϱ A, clip(ϱ, 1-γ, 1+γ) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Per-sample clipped surrogate as a graph node.
pub fn surrogate(g: &mut Graph, log_prob: Var, old_log_prob: &[f64], adv: &[f64], clip: f64) -> Result<Var> {
    let n = old_log_prob.len();
    let old = g.constant(Tensor::from_slice(&[n], old_log_prob)?);
    let a = g.constant(Tensor::from_slice(&[n], adv)?);
    let diff = g.sub(log_prob, old)?;
    let ratio = g.exp(diff)?;
    let unclipped = g.mul(ratio, a)?;
    let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let clipped = g.mul(clipped, a)?;
    g.minimum(unclipped, clipped)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub surrogate: f64,
    pub entropy: f64,
    pub value_loss: f64,
}

/// Policy, critic and their optimizer state.
#[derive(Clone, Debug)]
pub struct Agent {
    pub policy: PolicyNet,
    pub value: ValueNet,
    actor: Adam,
    critic: Adam,
    seed: u64,
    lrs: (f64, f64),
}

impl Agent {
    pub fn new(num_actions: usize, config: &PpoConfig, seed: u64) -> Self {
        let policy = PolicyNet::new(num_actions, seed);
        let value = ValueNet::new(seed ^ 0x5EED);
        let actor = Adam::new(config.actor_lr, policy.store());
        let critic = Adam::new(config.critic_lr, value.store());
        Self {
            policy,
            value,
            actor,
            critic,
            seed,
            lrs: (config.actor_lr, config.critic_lr),
        }
    }

    pub fn num_actions(&self) -> usize {
        self.policy.num_actions()
    }

    /// Back to the freshly initialised networks and optimizers.
    pub fn reset(&mut self) {
        let cfg = PpoConfig {
            actor_lr: self.lrs.0,
            critic_lr: self.lrs.1,
            ..PpoConfig::default()
        };
        *self = Self::new(self.num_actions(), &cfg, self.seed);
    }

    /// Clipped-surrogate ascent with entropy bonus, then critic regression to `G_b`.
    ///
    /// Advantages are computed once from the critic before any step and stored into `batch`.
    pub fn update(&mut self, batch: &mut [Trajectory], config: &PpoConfig) -> Result<UpdateStats> {
        let steps: Vec<&Step> = batch.iter().flat_map(|t| &t.steps).collect();
        if steps.is_empty() {
            return Ok(UpdateStats::default());
        }
        let k = self.num_actions();
        if steps
            .iter()
            .any(|s| s.mask.len() != k || s.action >= k || !s.mask[s.action])
        {
            return Err(Error::InvalidArgument(
                "trajectory step inconsistent with the action space".into(),
            ));
        }
        let states: Vec<AllocationState> = steps.iter().map(|s| s.state).collect();
        let old: Vec<f64> = steps.iter().map(|s| s.log_prob).collect();
        let actions: Vec<usize> = steps.iter().map(|s| s.action).collect();
        let mask: Vec<bool> = steps.iter().flat_map(|s| s.mask.iter().copied()).collect();
        let values = self.value.values(&states)?;
        let mut offset = 0;
        for t in batch.iter_mut() {
            t.advantages = advantages(&t.returns, &values[offset..offset + t.steps.len()]);
            offset += t.steps.len();
        }
        let mut adv: Vec<f64> = batch.iter().flat_map(|t| t.advantages.iter().copied()).collect();
        if config.normalize_advantages && adv.len() > 1 {
            let mean = adv.iter().sum::<f64>() / adv.len() as f64;
            let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
            adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
        }
        let returns: Vec<f64> = batch.iter().flat_map(|t| t.returns.iter().copied()).collect();
        let x = states_tensor(&states);
        let n = states.len();
        let mut stats = UpdateStats::default();
        for _ in 0..config.inner_iterations {
            let mut g = Graph::new();
            let xs = g.constant(x.clone());
            let logits = self.policy.forward(&mut g, xs)?;
            let logp_all = g.masked_log_softmax(logits, &mask)?;
            let p_all = g.masked_softmax(logits, &mask)?;
            let logp = g.gather(logp_all, &actions)?;
            let surr = surrogate(&mut g, logp, &old, &adv, config.clip)?;
            let surr = g.mean(surr)?;
            let plogp = g.mul(p_all, logp_all)?;
            let neg_h = g.sum(plogp)?;
            let neg_h = g.scale(neg_h, 1.0 / n as f64)?;
            let bonus = g.scale(neg_h, -config.entropy_weight)?;
            let objective = g.add(surr, bonus)?;
            let loss = g.scale(objective, -1.0)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "ppo_update" });
            }
            stats.surrogate = g.value(surr).item();
            stats.entropy = -g.value(neg_h).item();
            let grads = g.backward(loss)?;
            let grads = g.param_grads(&grads, self.policy.store());
            self.actor.step(self.policy.store_mut(), &grads)?;

            let mut g = Graph::new();
            let xs = g.constant(x.clone());
            let v = self.value.forward(&mut g, xs)?;
            let v = g.reshape(v, &[n])?;
            let target = g.constant(Tensor::from_slice(&[n], &returns)?);
            let vloss = g.mse(v, target)?;
            stats.value_loss = g.value(vloss).item();
            if !stats.value_loss.is_finite() {
                return Err(Error::NonFinite { op: "ppo_update" });
            }
            let grads = g.backward(vloss)?;
            let grads = g.param_grads(&grads, self.value.store());
            self.critic.step(self.value.store_mut(), &grads)?;
        }
        Ok(stats)
    }
}
