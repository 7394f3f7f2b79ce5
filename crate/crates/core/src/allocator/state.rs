use crate::codec::QuantizedLatent;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const RESIDUAL_FEATURES: usize = 4;
pub const LATENT_FEATURES: usize = 2 * crate::codec::LATENT_CHANNELS;
/// `[Φ_h (4); Φ_z (16); ρ_b; row; col]`.
pub const STATE_DIM: usize = RESIDUAL_FEATURES + LATENT_FEATURES + 3;

/// Encoder-side observables for one block, independent of the running budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockObservation {
    pub residual: [f64; RESIDUAL_FEATURES],
    pub latent: [f64; LATENT_FEATURES],
    /// Normalised `(row, col)`.
    pub coords: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AllocationState {
    pub features: [f64; STATE_DIM],
}

impl AllocationState {
    pub fn remaining_fraction(&self) -> f64 {
        self.features[RESIDUAL_FEATURES + LATENT_FEATURES]
    }

    pub fn coords(&self) -> (f64, f64) {
        (self.features[STATE_DIM - 2], self.features[STATE_DIM - 1])
    }
}

/// `ρ_b = max(0, (R_max - committed) / R_max)`.
pub fn remaining_fraction(bits_committed: f64, r_max: f64) -> f64 {
    ((r_max - bits_committed) / r_max).clamp(0.0, 1.0)
}

pub fn build_state(obs: &BlockObservation, bits_committed: f64, r_max: f64) -> Result<AllocationState> {
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("R_max must be positive, got {r_max}")));
    }
    let mut features = [0.0; STATE_DIM];
    features[..RESIDUAL_FEATURES].copy_from_slice(&obs.residual);
    features[RESIDUAL_FEATURES..RESIDUAL_FEATURES + LATENT_FEATURES].copy_from_slice(&obs.latent);
    features[RESIDUAL_FEATURES + LATENT_FEATURES] = remaining_fraction(bits_committed, r_max);
    features[STATE_DIM - 2] = obs.coords.0;
    features[STATE_DIM - 1] = obs.coords.1;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "build_state" });
    }
    Ok(AllocationState { features })
}

/// Per-channel mean of `z` over each block's footprint, then per-channel std.
///
/// `layout` only supplies the footprint geometry; its symbols are ignored.
pub fn latent_block_stats(z: &Tensor, layout: &QuantizedLatent, block: usize) -> Result<[f64; LATENT_FEATURES]> {
    let (c, h, w) = (layout.channels, layout.height, layout.width);
    if z.shape() != [c, h, w] && z.shape() != [1, c, h, w] {
        return Err(Error::Shape {
            op: "latent_block_stats",
            shapes: vec![z.shape().to_vec(), vec![c, h, w]],
        });
    }
    if c * 2 != LATENT_FEATURES {
        return Err(Error::InvalidArgument(format!(
            "latent has {c} channels, state expects {}",
            LATENT_FEATURES / 2
        )));
    }
    let cells: Vec<(usize, usize)> = layout.footprint(block).collect();
    let n = cells.len() as f64;
    let mut out = [0.0; LATENT_FEATURES];
    for ch in 0..c {
        let vals = cells.iter().map(|&(y, x)| z.data()[(ch * h + y) * w + x]);
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out[ch] = mean;
        out[c + ch] = var.sqrt();
    }
    Ok(out)
}
