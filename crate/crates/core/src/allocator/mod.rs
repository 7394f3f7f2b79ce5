//! Block-wise bitrate allocation by masked PPO with a Lagrangian budget penalty.

mod adapt;
mod dual;
mod env;
mod mask;
mod policy;
mod ppo;
mod state;

pub use adapt::{adapt_per_image, expected_utility, rollout, AdaptReport, AdaptRow, Adapted, Episode, Sampling};
pub use dual::{DualController, DEFAULT_DUAL_STEP};
pub use env::{AllocationEnv, Codec, CodecArtifact, CodecEnv, Outcome, SyntheticEnv};
pub use mask::mask_actions;
pub use policy::{masked_entropy, sample_categorical, states_tensor, PolicyNet, ValueNet, HIDDEN};
pub use ppo::{advantages, clipped_surrogate, surrogate, Agent, PpoConfig, Step, Trajectory, UpdateStats};
pub use state::{
    build_state, latent_block_stats, remaining_fraction, AllocationState, BlockObservation, LATENT_FEATURES,
    RESIDUAL_FEATURES, STATE_DIM,
};
