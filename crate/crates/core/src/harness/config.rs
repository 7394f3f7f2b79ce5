use std::path::{Path, PathBuf};

use crate::allocator::PpoConfig;
use crate::codec::StepLadder;
use crate::diffusion::{SamplerConfig, VarianceSchedule, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::imaging::DEFAULT_BLOCK_SIZE;
use crate::metrics::UtilityWeights;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input_dir: "data".into(),
            output_dir: "out".into(),
            checkpoint_dir: "checkpoints".into(),
        }
    }
}

/// Bit budget: absolute bits or a compression ratio converted with `R_max = 24 * pixels / ratio`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Bits(f64),
    TargetRatio(f64),
}

impl Budget {
    pub fn bits_for(&self, pixels: usize) -> Result<f64> {
        let bits = match *self {
            Budget::Bits(b) => b,
            Budget::TargetRatio(r) => 24.0 * pixels as f64 / r,
        };
        if !(bits > 0.0 && bits.is_finite()) {
            return Err(Error::Config(format!("budget {self:?} gives a non-positive bit count")));
        }
        Ok(bits)
    }
}

/// Toy-scale codec training recipe.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Joint encoder + denoiser steps with noisy-quantization relaxation.
    pub joint_steps: usize,
    /// Denoiser-only steps on hard-quantized latents from the frozen encoder.
    pub finetune_steps: usize,
    pub lr: f64,
    /// Weight of the rate proxy (bits per pixel) against the ε-prediction loss.
    pub rate_weight: f64,
    /// Square crop side used for training; must be a multiple of 4.
    pub crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            joint_steps: 1500,
            finetune_steps: 500,
            lr: 1e-3,
            rate_weight: 0.01,
            crop: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub block_size: usize,
    /// Allocation levels `K`; the first `K` rungs of the default step ladder.
    pub num_actions: usize,
    pub budget: Option<Budget>,
    pub seed: u64,
    pub schedule_steps: usize,
    pub sampler: SamplerConfig,
    pub ppo: PpoConfig,
    pub weights: UtilityWeights,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            block_size: DEFAULT_BLOCK_SIZE,
            num_actions: 5,
            budget: None,
            seed: 0,
            schedule_steps: DEFAULT_STEPS,
            sampler: SamplerConfig::default(),
            ppo: PpoConfig::default(),
            weights: UtilityWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size < 4 || !self.block_size.is_multiple_of(crate::codec::DOWNSAMPLE) || self.block_size > 255 {
            return Err(Error::Config(format!(
                "block_size {} must be a multiple of 4 in 4..=252",
                self.block_size
            )));
        }
        self.ladder()?;
        self.schedule()?;
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule_steps {
            return Err(Error::Config(format!(
                "sampler steps {} outside 1..={}",
                self.sampler.steps, self.schedule_steps
            )));
        }
        if self.train.crop < 4 || !self.train.crop.is_multiple_of(crate::codec::DOWNSAMPLE) {
            return Err(Error::Config(format!(
                "training crop {} must be a multiple of 4",
                self.train.crop
            )));
        }
        if let Some(b) = self.budget {
            b.bits_for(1)?;
        }
        self.ppo.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn ladder(&self) -> Result<StepLadder> {
        StepLadder::truncated(self.num_actions).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::cosine(self.schedule_steps).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.block_size, cfg.num_actions, cfg.schedule_steps), (16, 5, 50));
        assert_eq!(cfg.ppo.clip, 0.2);
        assert_eq!(cfg.ppo.entropy_weight, 0.01);
        assert_eq!(cfg.ppo.dual_step, 1e-3);
        assert_eq!(
            cfg.weights,
            UtilityWeights {
                mse: 1.0,
                ssim: 0.5,
                lpips: 0.2,
                dists: 0.2
            }
        );
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_and_budget() {
        let cfg = RunConfig::from_toml("seed = 7\nbudget = { target_ratio = 24.0 }\n[ppo]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ppo.epochs, 2);
        assert_eq!(cfg.ppo.episodes, 4);
        assert_eq!(cfg.budget.unwrap().bits_for(64 * 64).unwrap(), 4096.0);
        assert_eq!(Budget::Bits(800.0).bits_for(10).unwrap(), 800.0);
    }

    #[test]
    fn invalid_configs() {
        assert!(RunConfig::from_toml("block_size = 10").is_err());
        assert!(RunConfig::from_toml("num_actions = 9").is_err());
        assert!(RunConfig::from_toml("unknown_key = 1").is_err());
        assert!(RunConfig::from_toml("budget = { bits = -5.0 }").is_err());
        assert!(RunConfig::from_toml("[ppo]\nclip = 1.5").is_err());
    }
}
