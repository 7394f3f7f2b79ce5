use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::state::{build_state, latent_block_stats, AllocationState, BlockObservation, LATENT_FEATURES};
use crate::codec::{
    fixed_overhead_bits, quantize, serialize, Bitstream, EncoderNet, EntropyModel, ModelBank, StepLadder,
};
use crate::diffusion::{reconstruct, NoisePredictor, SamplerConfig, VarianceSchedule};
use crate::error::{Error, Result};
use crate::imaging::{block_stats, highpass, partition, ImagePlane, Partition};
use crate::metrics::{MetricReport, MetricSuite};
use crate::numerics::Tensor;

/// Result of committing to a full allocation.
#[derive(Clone, Debug)]
pub struct Outcome<A> {
    pub utility: f64,
    /// Actual total bits `R_tot`.
    pub total_bits: f64,
    pub artifact: A,
}

/// Everything a rollout needs: observations, worst-case costs for masking, and a terminal evaluation.
pub trait AllocationEnv {
    type Artifact: Clone;

    fn num_blocks(&self) -> usize;

    fn num_actions(&self) -> usize;

    /// `R_max` in bits.
    fn budget(&self) -> f64;

    /// Bits spent regardless of the allocation (headers, coder flush allowance).
    fn fixed_bits(&self) -> f64;

    /// Upper bound on block `b`'s bits at action `a`.
    fn block_cost(&self, block: usize, action: usize) -> f64;

    fn observation(&self, block: usize) -> BlockObservation;

    fn evaluate(&self, actions: &[usize]) -> Result<Outcome<Self::Artifact>>;

    fn state(&self, block: usize, bits_committed: f64) -> Result<AllocationState> {
        build_state(&self.observation(block), bits_committed, self.budget())
    }

    /// Bound on the all-coarsest allocation.
    fn minimum_bits(&self) -> f64 {
        self.fixed_bits() + (0..self.num_blocks()).map(|b| self.block_cost(b, 0)).sum::<f64>()
    }

    fn estimated_bits(&self, actions: &[usize]) -> f64 {
        self.fixed_bits()
            + actions
                .iter()
                .enumerate()
                .map(|(b, &a)| self.block_cost(b, a))
                .sum::<f64>()
    }
}

/// Test double with known additive per-block utilities and exact costs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticEnv {
    /// `[block][action]`, non-positive and increasing in the action.
    pub utilities: Vec<Vec<f64>>,
    /// `[block][action]`, positive and increasing in the action.
    pub costs: Vec<Vec<f64>>,
    pub fixed: f64,
    pub r_max: f64,
    pub rows: usize,
    pub cols: usize,
}

impl SyntheticEnv {
    /// Random instance on a `rows x cols` grid whose budget sits `tightness` of the way from the
    /// all-coarsest to the all-finest cost.
    pub fn random(rows: usize, cols: usize, num_actions: usize, tightness: f64, seed: u64) -> Result<Self> {
        if rows * cols == 0 || num_actions == 0 || !(0.0..=1.0).contains(&tightness) {
            return Err(Error::InvalidArgument(
                "synthetic env needs blocks, actions and tightness in [0, 1]".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut utilities = Vec::new();
        let mut costs = Vec::new();
        for _ in 0..rows * cols {
            let detail: f64 = rng.random_range(0.02..0.3);
            let decay: f64 = rng.random_range(0.2..0.8);
            let base: f64 = rng.random_range(20.0..60.0);
            let growth: f64 = rng.random_range(0.6..1.6);
            utilities.push((0..num_actions).map(|a| -detail * decay.powi(a as i32)).collect());
            costs.push((0..num_actions).map(|a| base * (1.0 + growth * a as f64)).collect());
        }
        let fixed = 64.0;
        let lo: f64 = costs.iter().map(|c: &Vec<f64>| c[0]).sum();
        let hi: f64 = costs.iter().map(|c| c[num_actions - 1]).sum();
        Ok(Self {
            utilities,
            costs,
            fixed,
            r_max: fixed + lo + tightness * (hi - lo),
            rows,
            cols,
        })
    }

    pub fn utility_of(&self, actions: &[usize]) -> f64 {
        actions.iter().enumerate().map(|(b, &a)| self.utilities[b][a]).sum()
    }

    /// Exhaustive search over every allocation; returns the best feasible `(actions, utility)`.
    pub fn brute_force(&self) -> (Vec<usize>, f64) {
        let (b, k) = (self.num_blocks(), self.num_actions());
        let mut best = (vec![0; b], f64::NEG_INFINITY);
        let mut actions = vec![0; b];
        for code in 0..k.pow(b as u32) {
            let mut c = code;
            for a in actions.iter_mut() {
                *a = c % k;
                c /= k;
            }
            if self.estimated_bits(&actions) <= self.r_max {
                let u = self.utility_of(&actions);
                if u > best.1 {
                    best = (actions.clone(), u);
                }
            }
        }
        best
    }
}

impl AllocationEnv for SyntheticEnv {
    type Artifact = ();

    fn num_blocks(&self) -> usize {
        self.utilities.len()
    }

    fn num_actions(&self) -> usize {
        self.utilities[0].len()
    }

    fn budget(&self) -> f64 {
        self.r_max
    }

    fn fixed_bits(&self) -> f64 {
        self.fixed
    }

    fn block_cost(&self, block: usize, action: usize) -> f64 {
        self.costs[block][action]
    }

    fn observation(&self, block: usize) -> BlockObservation {
        let u = &self.utilities[block];
        let c = &self.costs[block];
        let k = u.len() - 1;
        let norm = |v: usize, n: usize| {
            if n > 1 {
                v as f64 / (n - 1) as f64
            } else {
                0.0
            }
        };
        BlockObservation {
            residual: [-u[0], -u[k], c[0] / 100.0, c[k] / 100.0],
            latent: [0.0; LATENT_FEATURES],
            coords: (norm(block / self.cols, self.rows), norm(block % self.cols, self.cols)),
        }
    }

    fn evaluate(&self, actions: &[usize]) -> Result<Outcome<()>> {
        if actions.len() != self.num_blocks() || actions.iter().any(|&a| a >= self.num_actions()) {
            return Err(Error::InvalidArgument(format!(
                "allocation {actions:?} does not fit the environment"
            )));
        }
        Ok(Outcome {
            utility: self.utility_of(actions),
            total_bits: self.estimated_bits(actions),
            artifact: (),
        })
    }
}

/// What a codec rollout produces besides its utility.
#[derive(Clone, Debug)]
pub struct CodecArtifact {
    pub bitstream: Bitstream,
    pub reconstruction: ImagePlane,
    pub report: MetricReport,
}

/// Trained codec parts shared across images.
pub struct Codec<'a> {
    pub encoder: &'a EncoderNet,
    pub model: &'a EntropyModel,
    pub ladder: &'a StepLadder,
    pub denoiser: &'a dyn NoisePredictor,
    pub schedule: &'a VarianceSchedule,
    pub sampler: SamplerConfig,
    pub metrics: &'a MetricSuite,
    pub block_size: usize,
}

/// One image against the real encoder, range coder, diffusion decoder and metrics.
pub struct CodecEnv<'a> {
    codec: &'a Codec<'a>,
    image: ImagePlane,
    part: Partition,
    z: Tensor,
    coded_model: EntropyModel,
    observations: Vec<BlockObservation>,
    /// `[block][action]` bits under the coder's integer frequency tables.
    costs: Vec<Vec<f64>>,
    fixed: f64,
    r_max: f64,
}

fn block_costs(z: &Tensor, part: &Partition, bank: &ModelBank, ladder: &StepLadder) -> Result<Vec<Vec<f64>>> {
    let blocks = part.grid.len();
    let mut costs = vec![vec![0.0; ladder.len()]; blocks];
    for a in 0..ladder.len() {
        let q = quantize(z, &part.grid, &vec![a; blocks], ladder)?;
        for (b, c, s) in q.coding_order() {
            costs[b][a] += bank.get(a, c).coded_bits(s)?;
        }
    }
    Ok(costs)
}

impl<'a> CodecEnv<'a> {
    pub fn new(codec: &'a Codec<'a>, image: &ImagePlane, r_max: f64) -> Result<Self> {
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("R_max must be positive, got {r_max}")));
        }
        let part = partition(image, codec.block_size)?;
        let z = codec.encoder.encode(&part.padded)?;
        let coded_model = codec.model.quantized();
        let bank = coded_model.bank(codec.ladder)?;
        let costs = block_costs(&z, &part, &bank, codec.ladder)?;
        let layout = quantize(&z, &part.grid, &vec![0; part.grid.len()], codec.ladder)?;
        let residual = highpass(&part.padded);
        let observations = part
            .grid
            .blocks()
            .iter()
            .map(|blk| {
                Ok(BlockObservation {
                    residual: block_stats(&residual, blk),
                    latent: latent_block_stats(&z, &layout, blk.index)?,
                    coords: part.grid.normalized_coords(blk.index),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fixed = fixed_overhead_bits(coded_model.channels(), part.grid.len());
        Ok(Self {
            codec,
            image: image.clone(),
            part,
            z,
            coded_model,
            observations,
            costs,
            fixed,
            r_max,
        })
    }

    pub fn image(&self) -> &ImagePlane {
        &self.image
    }

    /// Errors when even the all-coarsest allocation may exceed the budget.
    pub fn check_feasible(&self) -> Result<()> {
        let minimum = self.minimum_bits();
        if minimum > self.r_max {
            return Err(Error::InfeasibleBudget {
                budget: self.r_max,
                minimum,
            });
        }
        Ok(())
    }

    pub fn encode(&self, actions: &[usize]) -> Result<Bitstream> {
        let q = quantize(&self.z, &self.part.grid, actions, self.codec.ladder)?;
        serialize(
            &q,
            self.image.height(),
            self.image.width(),
            self.codec.block_size,
            &self.coded_model,
            self.codec.ladder,
        )
    }
}

impl AllocationEnv for CodecEnv<'_> {
    type Artifact = CodecArtifact;

    fn num_blocks(&self) -> usize {
        self.part.grid.len()
    }

    fn num_actions(&self) -> usize {
        self.codec.ladder.len()
    }

    fn budget(&self) -> f64 {
        self.r_max
    }

    fn fixed_bits(&self) -> f64 {
        self.fixed
    }

    fn block_cost(&self, block: usize, action: usize) -> f64 {
        self.costs[block][action]
    }

    fn observation(&self, block: usize) -> BlockObservation {
        self.observations[block]
    }

    fn evaluate(&self, actions: &[usize]) -> Result<Outcome<CodecArtifact>> {
        let q = quantize(&self.z, &self.part.grid, actions, self.codec.ladder)?;
        let bitstream = serialize(
            &q,
            self.image.height(),
            self.image.width(),
            self.codec.block_size,
            &self.coded_model,
            self.codec.ladder,
        )?;
        let rec = reconstruct(
            &q,
            self.codec.ladder,
            self.image.height(),
            self.image.width(),
            self.codec.denoiser,
            self.codec.schedule,
            &self.codec.sampler,
        )?;
        let report = self.codec.metrics.evaluate(&self.image, &rec.image)?;
        Ok(Outcome {
            utility: report.utility,
            total_bits: bitstream.total_bits(),
            artifact: CodecArtifact {
                bitstream,
                reconstruction: rec.image,
                report,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_env_is_monotone_and_bounded() {
        let env = SyntheticEnv::random(2, 4, 3, 0.4, 7).unwrap();
        assert_eq!((env.num_blocks(), env.num_actions()), (8, 3));
        for b in 0..8 {
            for a in 1..3 {
                assert!(env.utilities[b][a] > env.utilities[b][a - 1]);
                assert!(env.costs[b][a] > env.costs[b][a - 1]);
            }
        }
        assert!(env.minimum_bits() <= env.budget());
        assert!(env.estimated_bits(&[2; 8]) > env.budget());
        let (best, u) = env.brute_force();
        assert!(env.estimated_bits(&best) <= env.budget());
        assert!(u > env.utility_of(&[0; 8]));
        let obs = env.observation(7);
        assert_eq!(obs.coords, (1.0, 1.0));
        assert_eq!(env.observation(0).coords, (0.0, 0.0));
    }
}
