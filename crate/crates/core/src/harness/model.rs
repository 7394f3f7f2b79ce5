use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::codec::{fit_entropy_model, quantize, EncoderNet, EntropyModel, StepLadder, LATENT_CHANNELS};
use crate::diffusion::{
    decode_checkpoint, encode_checkpoint, fit_denoiser, forward_diffuse, timestep_embedding, DenoiserNet,
    DenoiserTrainConfig, DiffusionSample, VarianceSchedule,
};
use crate::error::{Error, Result};
use crate::imaging::{BlockGrid, ImagePlane};
use crate::numerics::{Adam, Graph, ParamStore, Tensor};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
const SIGMA_TENSOR: &str = "entropy.sigma";

/// Encoder, entropy model and denoiser saved together as one checkpoint.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub encoder: EncoderNet,
    pub entropy: EntropyModel,
    pub denoiser: DenoiserNet,
}

impl ModelBundle {
    pub fn untrained(seed: u64) -> Self {
        Self {
            encoder: EncoderNet::new(seed),
            entropy: EntropyModel::new(vec![1.0; LATENT_CHANNELS]).expect("unit sigmas"),
            denoiser: DenoiserNet::new(seed.wrapping_add(1)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sigma = Tensor::from_slice(&[self.entropy.channels()], self.entropy.sigmas()).expect("sigma shape");
        let tensors = self
            .encoder
            .store
            .named()
            .chain(self.denoiser.store.named())
            .chain(std::iter::once((SIGMA_TENSOR, &sigma)));
        encode_checkpoint(tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let named = decode_checkpoint(bytes)?;
        let mut bundle = Self::untrained(0);
        bundle.encoder.store.load_named(&named)?;
        bundle.denoiser.store.load_named(&named)?;
        let (_, sigma) = named
            .iter()
            .find(|(n, _)| n == SIGMA_TENSOR)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{SIGMA_TENSOR}`")))?;
        bundle.entropy = EntropyModel::new(sigma.data().to_vec())?;
        let expected = bundle.encoder.store.len() + bundle.denoiser.store.len() + 1;
        if named.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors, expected {expected}",
                named.len()
            )));
        }
        Ok(bundle)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join(CHECKPOINT_FILE);
        crate::imaging::write_atomic(&path, &self.to_bytes())?;
        Ok(path)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(CHECKPOINT_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub phase: &'static str,
    /// Rate proxy in bits per pixel; empty in the denoiser-only phase.
    pub rate_loss: Option<f64>,
    pub distortion_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<TrainLogRow>,
}

impl TrainOutcome {
    /// Joint-phase total loss `rate_weight * rate + distortion` per step.
    pub fn joint_losses(&self, rate_weight: f64) -> Vec<f64> {
        self.log
            .iter()
            .filter_map(|r| r.rate_loss.map(|rate| rate_weight * rate + r.distortion_loss))
            .collect()
    }

    pub fn write_log(&self, w: impl std::io::Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        for row in &self.log {
            csv.serialize(row)?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn random_crop(image: &ImagePlane, size: usize, rng: &mut impl Rng) -> Result<ImagePlane> {
    if image.height() < size || image.width() < size {
        return Err(Error::InsufficientData(format!(
            "training image {}x{} smaller than crop {size}",
            image.height(),
            image.width()
        )));
    }
    let y0 = rng.random_range(0..=image.height() - size);
    let x0 = rng.random_range(0..=image.width() - size);
    image.crop_at(y0, x0, size, size)
}

/// Per-cell quantization step map `[1, C, h, w]` for a random allocation.
fn step_map(grid: &BlockGrid, actions: &[usize], ladder: &StepLadder, cells: usize) -> Vec<f64> {
    let (h, w) = (grid.padded_height() / 4, grid.padded_width() / 4);
    let cb = grid.block_size / 4;
    let mut out = Vec::with_capacity(LATENT_CHANNELS * h * w);
    for _ in 0..LATENT_CHANNELS {
        for y in 0..h {
            for x in 0..w {
                out.push(ladder.step(actions[(y / cb) * grid.cols + x / cb]));
            }
        }
    }
    debug_assert_eq!(out.len(), cells);
    out
}

/// Joint encoder + denoiser training with additive-uniform quantization noise and a Gaussian rate
/// proxy, then σ fitted on the training latents, then denoiser fine-tuning on hard-quantized latents.
pub fn train_codec(images: &[ImagePlane], config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::InsufficientData("no training images".into()));
    }
    let tc = &config.train;
    let ladder = config.ladder()?;
    let schedule: VarianceSchedule = config.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut bundle = ModelBundle::untrained(config.seed);
    let mut sigma_store = ParamStore::new();
    let log_sigma = sigma_store.add("entropy.log_sigma", Tensor::zeros(&[LATENT_CHANNELS]));
    let mut enc_opt = Adam::new(tc.lr, &bundle.encoder.store);
    let mut den_opt = Adam::new(tc.lr, &bundle.denoiser.store);
    let mut sig_opt = Adam::new(tc.lr, &sigma_store);
    let grid = BlockGrid::new(tc.crop, tc.crop, config.block_size.min(tc.crop))?;
    let pixels = (tc.crop * tc.crop) as f64;
    let cells = LATENT_CHANNELS * (tc.crop / 4) * (tc.crop / 4);
    let mut log = Vec::new();
    for step in 0..tc.joint_steps {
        let img = random_crop(&images[rng.random_range(0..images.len())], tc.crop, &mut rng)?;
        let actions: Vec<usize> = (0..grid.len()).map(|_| rng.random_range(0..ladder.len())).collect();
        let steps = step_map(&grid, &actions, &ladder, cells);
        let noise: Vec<f64> = steps.iter().map(|d| d * (rng.random::<f64>() - 0.5)).collect();
        let n = rng.random_range(1..=schedule.steps());
        let x0 = img.to_tensor();
        let eps = Tensor::randn(x0.shape(), &mut rng);
        let xn = forward_diffuse(&x0, n, &eps, &schedule)?;

        let mut g = Graph::new();
        let x = g.constant(x0);
        let z = bundle.encoder.forward(&mut g, x)?;
        let zs = g.value(z).shape().to_vec();
        let u = g.constant(Tensor::new(&zs, noise)?);
        let z_tilde = g.add(z, u)?;
        // per-cell bits ≈ max(0, (ẑ/σ)²/(2 ln 2) + log2 σ + log2 √(2π) - log2 Δ)
        let ls = g.param(&sigma_store, log_sigma);
        let neg = g.scale(ls, -1.0)?;
        let inv = g.exp(neg)?;
        let inv = g.reshape(inv, &[1, LATENT_CHANNELS])?;
        let y = g.mul_channel(z_tilde, inv)?;
        let y2 = g.mul(y, y)?;
        let quad = g.scale(y2, 0.5 / std::f64::consts::LN_2)?;
        let log2s = g.scale(ls, 1.0 / std::f64::consts::LN_2)?;
        let log2s = g.reshape(log2s, &[1, LATENT_CHANNELS])?;
        let per_cell = g.add_channel(quad, log2s)?;
        let offsets: Vec<f64> = steps
            .iter()
            .map(|d| 0.5 * (2.0 * std::f64::consts::PI).log2() - d.log2())
            .collect();
        let offsets = g.constant(Tensor::new(&zs, offsets)?);
        let per_cell = g.add(per_cell, offsets)?;
        let per_cell = g.clamp(per_cell, 0.0, f64::MAX)?;
        let bits = g.sum(per_cell)?;
        let rate = g.scale(bits, 1.0 / pixels)?;
        let xn = g.constant(xn);
        let t = g.constant(timestep_embedding(&[n]));
        let pred = bundle.denoiser.forward(&mut g, xn, z_tilde, t)?;
        let target = g.constant(eps);
        let dist = g.mse(pred, target)?;
        let weighted = g.scale(rate, tc.rate_weight)?;
        let loss = g.add(weighted, dist)?;
        let (rate_v, dist_v) = (g.value(rate).item(), g.value(dist).item());
        if !(g.value(loss).item().is_finite()) {
            return Err(Error::Diverged { step });
        }
        log.push(TrainLogRow {
            step,
            phase: "joint",
            rate_loss: Some(rate_v),
            distortion_loss: dist_v,
        });
        let grads = g.backward(loss)?;
        let ge = g.param_grads(&grads, &bundle.encoder.store);
        let gd = g.param_grads(&grads, &bundle.denoiser.store);
        let gs = g.param_grads(&grads, &sigma_store);
        for r in [
            enc_opt.step(&mut bundle.encoder.store, &ge),
            den_opt.step(&mut bundle.denoiser.store, &gd),
            sig_opt.step(&mut sigma_store, &gs),
        ] {
            match r {
                Err(Error::NonFiniteGradient(_)) => return Err(Error::Diverged { step }),
                other => other?,
            }
        }
    }

    let mut latents = Vec::with_capacity(images.len());
    for img in images {
        let h = img.height() / 4 * 4;
        let w = img.width() / 4 * 4;
        latents.push(bundle.encoder.encode(&img.crop(h, w)?)?);
    }
    bundle.entropy = fit_entropy_model(&latents)?;

    if tc.finetune_steps > 0 {
        let mut data = Vec::new();
        for _ in 0..(8 * images.len()).max(16) {
            let img = random_crop(&images[rng.random_range(0..images.len())], tc.crop, &mut rng)?;
            let actions: Vec<usize> = (0..grid.len()).map(|_| rng.random_range(0..ladder.len())).collect();
            let z = bundle.encoder.encode(&img)?;
            let q = quantize(&z, &grid, &actions, &ladder)?;
            data.push(DiffusionSample {
                image: img,
                cond: q.dequantize(&ladder)?,
            });
        }
        let dcfg = DenoiserTrainConfig {
            steps: tc.finetune_steps,
            lr: tc.lr,
            seed: config.seed.wrapping_add(17),
        };
        let report = fit_denoiser(&mut bundle.denoiser, &data, &schedule, &dcfg).map_err(|e| match e {
            Error::Diverged { step } => Error::Diverged {
                step: tc.joint_steps + step,
            },
            other => other,
        })?;
        log.extend(report.losses.iter().enumerate().map(|(i, &l)| TrainLogRow {
            step: tc.joint_steps + i,
            phase: "finetune",
            rate_loss: None,
            distortion_loss: l,
        }));
    }
    Ok(TrainOutcome { bundle, log })
}
