use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{DOWNSAMPLE, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::{Conv2d, ConvTranspose2d, Graph, Linear, ParamStore, Tensor, Var};

pub const TIME_EMBED_DIM: usize = 32;
pub const BASE_CHANNELS: usize = 32;

/// Anything that predicts the noise `ε` in `x_n` given the conditioning latent.
pub trait NoisePredictor {
    /// `x_n: [1, 3, H, W]`, `cond: [1, C, H/4, W/4]` (dequantized latent).
    fn predict(&self, x_n: &Tensor, n: usize, cond: &Tensor) -> Result<Tensor>;
}

/// Sinusoidal embedding of an integer timestep, each row `[sin(n ω_i)..., cos(n ω_i)...]`.
pub fn timestep_embedding(steps: &[usize]) -> Tensor {
    let half = TIME_EMBED_DIM / 2;
    let mut data = Vec::with_capacity(steps.len() * TIME_EMBED_DIM);
    for &n in steps {
        let freqs = (0..half).map(|i| (-(i as f64) / half as f64 * 10000f64.ln()).exp());
        let args: Vec<f64> = freqs.map(|w| n as f64 * w).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new(&[steps.len(), TIME_EMBED_DIM], data).expect("embedding shape")
}

/// Two-level U-Net over `[x_n ; upsample(ẑ)]`, with a timestep embedding added after each conv
/// plus two time-gated output paths: a copy of `x_n` and an image decoded from `ẑ` alone.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub store: ParamStore,
    time_mlp: Linear,
    time_proj: [Linear; 6],
    conv_in: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    mid: Conv2d,
    up1: ConvTranspose2d,
    up1_conv: Conv2d,
    up2: ConvTranspose2d,
    up2_conv: Conv2d,
    conv_out: Conv2d,
    skip_gate: Linear,
    cond_dec1: Conv2d,
    cond_dec2: Conv2d,
    cond_gate: Linear,
}

impl DenoiserNet {
    pub fn new(seed: u64) -> Self {
        let c = BASE_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let hidden = 2 * TIME_EMBED_DIM;
        let time_mlp = Linear::new(&mut s, "denoiser.time_mlp", TIME_EMBED_DIM, hidden, &mut rng);
        let widths = [c, 2 * c, 2 * c, 2 * c, 2 * c, c];
        let time_proj =
            std::array::from_fn(|i| Linear::new(&mut s, &format!("denoiser.time{i}"), hidden, widths[i], &mut rng));
        let conv_in = Conv2d::new(&mut s, "denoiser.conv_in", 3 + LATENT_CHANNELS, c, 3, 1, 1, &mut rng);
        let down1 = Conv2d::new(&mut s, "denoiser.down1", c, 2 * c, 3, 2, 1, &mut rng);
        let down2 = Conv2d::new(&mut s, "denoiser.down2", 2 * c, 2 * c, 3, 2, 1, &mut rng);
        let mid = Conv2d::new(&mut s, "denoiser.mid", 2 * c, 2 * c, 3, 1, 1, &mut rng);
        let up1 = ConvTranspose2d::new(&mut s, "denoiser.up1", 2 * c, 2 * c, 2, 2, 0, &mut rng);
        let up1_conv = Conv2d::new(&mut s, "denoiser.up1_conv", 4 * c, 2 * c, 3, 1, 1, &mut rng);
        let up2 = ConvTranspose2d::new(&mut s, "denoiser.up2", 2 * c, c, 2, 2, 0, &mut rng);
        let up2_conv = Conv2d::new(&mut s, "denoiser.up2_conv", 2 * c, c, 3, 1, 1, &mut rng);
        let conv_out = Conv2d::new(&mut s, "denoiser.conv_out", c, 3, 3, 1, 1, &mut rng);
        let skip_gate = Linear::new(&mut s, "denoiser.skip_gate", hidden, 3, &mut rng);
        let cond_dec1 = Conv2d::new(&mut s, "denoiser.cond_dec1", LATENT_CHANNELS, c / 2, 3, 1, 1, &mut rng);
        let cond_dec2 = Conv2d::new(&mut s, "denoiser.cond_dec2", c / 2, 3, 3, 1, 1, &mut rng);
        let cond_gate = Linear::new(&mut s, "denoiser.cond_gate", hidden, 3, &mut rng);
        // zero-output init: ε̂ = 0 for an untrained net
        s.get_mut(conv_out.weight).data_mut().fill(0.0);
        s.get_mut(skip_gate.weight).data_mut().fill(0.0);
        s.get_mut(cond_gate.weight).data_mut().fill(0.0);
        Self {
            store: s,
            time_mlp,
            time_proj,
            conv_in,
            down1,
            down2,
            mid,
            up1,
            up1_conv,
            up2,
            up2_conv,
            conv_out,
            skip_gate,
            cond_dec1,
            cond_dec2,
            cond_gate,
        }
    }

    /// `x_n: [N, 3, H, W]`, `cond: [N, C, H/4, W/4]`, `temb: [N, 32]`; H and W multiples of 4.
    pub fn forward(&self, g: &mut Graph, x_n: Var, cond: Var, temb: Var) -> Result<Var> {
        let s = &self.store;
        let shape = g.value(x_n).shape().to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(DOWNSAMPLE) || !shape[3].is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Shape {
                op: "denoiser",
                shapes: vec![shape],
            });
        }
        let t = self.time_mlp.forward(g, s, temb)?;
        let t = g.silu(t)?;
        let stage = |g: &mut Graph, i: usize, h: Var| -> Result<Var> {
            let e = self.time_proj[i].forward(g, s, t)?;
            let h = g.add_channel(h, e)?;
            g.silu(h)
        };
        let up = g.upsample_nearest(cond, DOWNSAMPLE)?;
        let x = g.concat(&[x_n, up])?;
        let h0 = self.conv_in.forward(g, s, x)?;
        let h0 = stage(g, 0, h0)?;
        let h1 = self.down1.forward(g, s, h0)?;
        let h1 = stage(g, 1, h1)?;
        let h2 = self.down2.forward(g, s, h1)?;
        let h2 = stage(g, 2, h2)?;
        let m = self.mid.forward(g, s, h2)?;
        let m = stage(g, 3, m)?;
        let u = self.up1.forward(g, s, m)?;
        let u = g.concat(&[u, h1])?;
        let u = self.up1_conv.forward(g, s, u)?;
        let u = stage(g, 4, u)?;
        let u = self.up2.forward(g, s, u)?;
        let u = g.concat(&[u, h0])?;
        let u = self.up2_conv.forward(g, s, u)?;
        let u = stage(g, 5, u)?;
        let out = self.conv_out.forward(g, s, u)?;
        // time-gated identity path from x_n
        let gate = self.skip_gate.forward(g, s, t)?;
        let skip = g.mul_channel(x_n, gate)?;
        let out = g.add(out, skip)?;
        // time-gated image estimate decoded from the latent alone
        let d = self.cond_dec1.forward(g, s, up)?;
        let d = g.silu(d)?;
        let d = self.cond_dec2.forward(g, s, d)?;
        let gate = self.cond_gate.forward(g, s, t)?;
        let d = g.mul_channel(d, gate)?;
        g.add(out, d)
    }
}

impl NoisePredictor for DenoiserNet {
    fn predict(&self, x_n: &Tensor, n: usize, cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(x_n.clone());
        let c = g.constant(cond.clone());
        let t = g.constant(timestep_embedding(&[n]));
        let out = self.forward(&mut g, x, c, t)?;
        Ok(g.value(out).clone())
    }
}

/// Test double that knows the clean image and returns the exact noise.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub x0: Tensor,
    pub alpha_bars: Vec<f64>,
}

impl NoisePredictor for OracleDenoiser {
    fn predict(&self, x_n: &Tensor, n: usize, _cond: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bars[n];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x_n
            .data()
            .iter()
            .zip(self.x0.data())
            .map(|(x, x0)| (x - a * x0) / b)
            .collect();
        Tensor::new(x_n.shape(), data)
    }
}
