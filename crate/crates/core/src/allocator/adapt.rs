use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dual::DualController;
use super::env::{AllocationEnv, Outcome};
use super::mask::mask_actions;
use super::policy::sample_categorical;
use super::ppo::{Agent, PpoConfig, Step, Trajectory};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Stochastic,
    Greedy,
}

/// One episode: the trajectory and what its allocation produced.
#[derive(Clone, Debug)]
pub struct Episode<A> {
    pub trajectory: Trajectory,
    pub outcome: Outcome<A>,
}

impl<A> Episode<A> {
    pub fn actions(&self) -> Vec<usize> {
        self.trajectory.actions()
    }
}

fn masks_for<E: AllocationEnv>(env: &E, block: usize, committed: f64, masking: bool) -> Vec<bool> {
    let k = env.num_actions();
    if !masking {
        return vec![true; k];
    }
    let floor_rest: f64 = (block + 1..env.num_blocks()).map(|b| env.block_cost(b, 0)).sum();
    let costs: Vec<f64> = (0..k).map(|a| env.block_cost(block, a)).collect();
    mask_actions(env.budget() - env.fixed_bits() - committed, &costs, floor_rest)
}

/// Sample `β_b` block by block in raster order, then encode/decode once for the terminal reward.
pub fn rollout<E: AllocationEnv>(
    env: &E,
    agent: &Agent,
    dual: &DualController,
    masking: bool,
    sampling: Sampling,
    rng: &mut impl Rng,
) -> Result<Episode<E::Artifact>> {
    if agent.num_actions() != env.num_actions() {
        return Err(Error::InvalidArgument(format!(
            "policy has {} actions, environment {}",
            agent.num_actions(),
            env.num_actions()
        )));
    }
    let mut committed = 0.0;
    let mut steps = Vec::with_capacity(env.num_blocks());
    for b in 0..env.num_blocks() {
        let state = env.state(b, committed)?;
        let mask = masks_for(env, b, committed, masking);
        let probs = agent.policy.probabilities(&state, &mask)?;
        let action = match sampling {
            Sampling::Stochastic => sample_categorical(&probs, rng),
            Sampling::Greedy => agent.policy.greedy(&state, &mask)?,
        };
        committed += env.block_cost(b, action);
        steps.push(Step {
            state,
            action,
            log_prob: probs[action].ln(),
            mask,
        });
    }
    let actions: Vec<usize> = steps.iter().map(|s| s.action).collect();
    let outcome = env.evaluate(&actions)?;
    let reward = dual.reward(outcome.utility, outcome.total_bits);
    Ok(Episode {
        trajectory: Trajectory::new(steps, reward),
        outcome,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct AdaptRow {
    pub epoch: usize,
    pub episode: usize,
    pub utility: f64,
    pub total_bits: f64,
    pub eta: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptReport {
    pub rows: Vec<AdaptRow>,
}

impl AdaptReport {
    /// Mean `R_tot` per epoch, in epoch order.
    pub fn epoch_mean_bits(&self) -> Vec<f64> {
        let epochs = self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<_> = self.rows.iter().filter(|r| r.epoch == e).collect();
                rows.iter().map(|r| r.total_bits).sum::<f64>() / rows.len().max(1) as f64
            })
            .collect()
    }

    pub fn eta_trace(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if r.episode == 0 {
                out.push(r.eta);
            }
        }
        out
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(&mut w);
        for r in &self.rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adapted<A> {
    pub episode: Episode<A>,
    pub report: AdaptReport,
    pub final_eta: f64,
}

fn better<A>(candidate: &Outcome<A>, incumbent: &Outcome<A>, r_max: f64) -> bool {
    match (candidate.total_bits <= r_max, incumbent.total_bits <= r_max) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => candidate.utility > incumbent.utility,
        (false, false) => candidate.total_bits < incumbent.total_bits,
    }
}

/// Test-time adaptation on one image: `M` epochs of {E rollouts, PPO update, dual update}
/// followed by a last batch of `E` rollouts; returns the best rollout seen.
///
/// Best means highest utility among rollouts within budget, else the smallest `R_tot`.
pub fn adapt_per_image<E: AllocationEnv>(
    env: &E,
    agent: &mut Agent,
    config: &PpoConfig,
    seed: u64,
) -> Result<Adapted<E::Artifact>> {
    config.validate()?;
    if config.reset_per_image {
        agent.reset();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dual = DualController::new(env.budget(), config.dual_step)?;
    let mut report = AdaptReport::default();
    let mut best: Option<Episode<E::Artifact>> = None;
    for epoch in 0..=config.epochs {
        let eta = dual.eta();
        let mut batch = Vec::with_capacity(config.episodes);
        for episode in 0..config.episodes {
            let ep = rollout(env, agent, &dual, config.masking, Sampling::Stochastic, &mut rng)?;
            report.rows.push(AdaptRow {
                epoch,
                episode,
                utility: ep.outcome.utility,
                total_bits: ep.outcome.total_bits,
                eta,
                feasible: ep.outcome.total_bits <= env.budget(),
            });
            if best
                .as_ref()
                .is_none_or(|b| better(&ep.outcome, &b.outcome, env.budget()))
            {
                best = Some(ep.clone());
            }
            batch.push(ep.trajectory);
        }
        if epoch < config.epochs {
            agent.update(&mut batch, config)?;
            let mean_bits = report.rows[report.rows.len() - config.episodes..]
                .iter()
                .map(|r| r.total_bits)
                .sum::<f64>()
                / config.episodes as f64;
            dual.update(mean_bits);
        }
    }
    Ok(Adapted {
        episode: best.expect("at least one rollout"),
        report,
        final_eta: dual.eta(),
    })
}

/// Exact `E_π[U]` of the masked sequential policy by enumerating every reachable allocation.
///
/// Exponential in the block count; meant for micro environments.
pub fn expected_utility<E: AllocationEnv>(env: &E, agent: &Agent, masking: bool) -> Result<f64> {
    fn walk<E: AllocationEnv>(
        env: &E,
        agent: &Agent,
        masking: bool,
        prefix: &mut Vec<usize>,
        committed: f64,
        prob: f64,
    ) -> Result<f64> {
        let b = prefix.len();
        if b == env.num_blocks() {
            return Ok(prob * env.evaluate(prefix)?.utility);
        }
        let state = env.state(b, committed)?;
        let mask = masks_for(env, b, committed, masking);
        let probs = agent.policy.probabilities(&state, &mask)?;
        let mut total = 0.0;
        for (a, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                prefix.push(a);
                total += walk(env, agent, masking, prefix, committed + env.block_cost(b, a), prob * p)?;
                prefix.pop();
            }
        }
        Ok(total)
    }
    walk(env, agent, masking, &mut Vec::new(), 0.0, 1.0)
}
