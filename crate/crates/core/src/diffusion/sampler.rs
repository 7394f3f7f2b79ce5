use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::NoisePredictor;
use super::schedule::VarianceSchedule;
use crate::codec::{QuantizedLatent, StepLadder};
use crate::error::{Error, Result};
use crate::imaging::ImagePlane;
use crate::numerics::Tensor;

pub const DEFAULT_SAMPLER_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Ancestral (noise-injecting) updates instead of the deterministic reverse mean.
    pub stochastic: bool,
    /// Reverse steps actually taken, evenly spaced over the schedule.
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stochastic: false,
            steps: DEFAULT_SAMPLER_STEPS,
        }
    }
}

/// Descending timesteps `N = τ_S > ... > τ_0 = 0`.
pub fn sampler_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let s = steps.clamp(1, total);
    (0..=s)
        .rev()
        .map(|i| ((i * total) as f64 / s as f64).round() as usize)
        .collect()
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// `[1, 3, H, W]`, clamped to `[0, 1]`.
    pub x0: Tensor,
    /// Fraction of final prediction values that fell outside `[0, 1]`.
    pub clamp_fraction: f64,
    /// `x_τ` after each reverse step when tracing was requested.
    pub trace: Vec<Tensor>,
}

/// Reverse process from pure noise at `τ = N` down to `τ = 0`.
pub fn sample(
    cond: &Tensor,
    height: usize,
    width: usize,
    predictor: &dyn NoisePredictor,
    schedule: &VarianceSchedule,
    config: &SamplerConfig,
    trace: bool,
) -> Result<SampleOutput> {
    if config.steps == 0 || config.steps > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "sampler steps {} outside 1..={}",
            config.steps,
            schedule.steps()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = [1, 3, height, width];
    let mut x = Tensor::randn(&shape, &mut rng);
    let times = sampler_timesteps(schedule.steps(), config.steps);
    let mut out_trace = Vec::new();
    let mut clamp_fraction = 0.0;
    for pair in times.windows(2) {
        let (t, prev) = (pair[0], pair[1]);
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let eps = predictor.predict(&x, t, cond)?;
        if eps.shape() != shape {
            return Err(Error::Shape {
                op: "sample",
                shapes: vec![eps.shape().to_vec(), shape.to_vec()],
            });
        }
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let raw: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(xv, e)| (xv - sb * e) / sa)
            .collect();
        let outside = raw.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        clamp_fraction = outside as f64 / raw.len() as f64;
        let x0: Vec<f64> = raw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let sigma = if config.stochastic && prev > 0 {
            ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt()
        } else {
            0.0
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let noise = if sigma > 0.0 {
            Some(Tensor::randn(&shape, &mut rng))
        } else {
            None
        };
        let next: Vec<f64> = x
            .data()
            .iter()
            .zip(&x0)
            .enumerate()
            .map(|(i, (xv, x0v))| {
                // noise direction consistent with the clamped prediction
                let e = (xv - sa * x0v) / sb;
                let z = noise.as_ref().map_or(0.0, |n| n.data()[i]);
                ab_prev.sqrt() * x0v + dir * e + sigma * z
            })
            .collect();
        x = Tensor::new(&shape, next)?;
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "sample" });
        }
        if trace {
            out_trace.push(x.clone());
        }
    }
    let x0 = x.map(|v| v.clamp(0.0, 1.0));
    Ok(SampleOutput {
        x0,
        clamp_fraction,
        trace: out_trace,
    })
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: ImagePlane,
    pub clamp_fraction: f64,
}

/// Decode `x̃₀` from a quantized latent, cropped to `height x width`.
pub fn reconstruct(
    latent: &QuantizedLatent,
    ladder: &StepLadder,
    height: usize,
    width: usize,
    predictor: &dyn NoisePredictor,
    schedule: &VarianceSchedule,
    config: &SamplerConfig,
) -> Result<Reconstruction> {
    let cond = latent.dequantize(ladder)?;
    let (ph, pw) = (
        latent.height * crate::codec::DOWNSAMPLE,
        latent.width * crate::codec::DOWNSAMPLE,
    );
    let out = sample(&cond, ph, pw, predictor, schedule, config, false)?;
    let (full, _) = ImagePlane::from_tensor(&out.x0)?;
    Ok(Reconstruction {
        image: full.crop(height, width)?,
        clamp_fraction: out.clamp_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::OracleDenoiser;

    #[test]
    fn timesteps_cover_the_schedule() {
        assert_eq!(sampler_timesteps(50, 5), vec![50, 40, 30, 20, 10, 0]);
        assert_eq!(sampler_timesteps(10, 3), vec![10, 7, 3, 0]);
        assert_eq!(sampler_timesteps(4, 9), vec![4, 3, 2, 1, 0]);
    }

    fn oracle_case(stochastic: bool, steps: usize) -> (Tensor, SampleOutput) {
        let schedule = VarianceSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let oracle = OracleDenoiser {
            x0: x0.clone(),
            alpha_bars: schedule.alpha_bars().to_vec(),
        };
        let cfg = SamplerConfig {
            seed: 9,
            stochastic,
            steps,
        };
        let cond = Tensor::zeros(&[1, 8, 2, 2]);
        (x0, sample(&cond, 8, 8, &oracle, &schedule, &cfg, true).unwrap())
    }

    #[test]
    fn oracle_recovers_clean_image() {
        for (stochastic, steps) in [(false, 50), (false, 7), (true, 50)] {
            let (x0, out) = oracle_case(stochastic, steps);
            let err = x0
                .data()
                .iter()
                .zip(out.x0.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-3, "stochastic {stochastic}: {err}");
        }
    }

    #[test]
    fn oracle_trajectory_contracts() {
        let (x0, out) = oracle_case(false, 50);
        let dist: Vec<f64> = out
            .trace
            .iter()
            .map(|x| {
                x.data()
                    .iter()
                    .zip(x0.data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        assert!(dist.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{dist:?}");
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (_, a) = oracle_case(true, 10);
        let (_, b) = oracle_case(true, 10);
        assert_eq!(a.x0, b.x0);
    }

    #[test]
    fn step_count_validated() {
        let schedule = VarianceSchedule::default();
        let oracle = OracleDenoiser {
            x0: Tensor::zeros(&[1, 3, 4, 4]),
            alpha_bars: schedule.alpha_bars().to_vec(),
        };
        let cfg = SamplerConfig {
            steps: 51,
            ..Default::default()
        };
        assert!(sample(&Tensor::zeros(&[1, 8, 1, 1]), 4, 4, &oracle, &schedule, &cfg, false).is_err());
    }
}
