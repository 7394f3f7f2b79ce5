//! Variance schedule, forward noising, conditional denoiser and reverse sampler.

mod checkpoint;
mod net;
mod sampler;
mod schedule;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use net::{timestep_embedding, DenoiserNet, NoisePredictor, OracleDenoiser, BASE_CHANNELS, TIME_EMBED_DIM};
pub use sampler::{
    reconstruct, sample, sampler_timesteps, Reconstruction, SampleOutput, SamplerConfig, DEFAULT_SAMPLER_STEPS,
};
pub use schedule::{forward_diffuse, VarianceSchedule, DEFAULT_STEPS};
pub use train::{fit_denoiser, train_denoiser, DenoiserTrainConfig, DiffusionSample, TrainReport};
