use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::ImagePlane;
use crate::numerics::{Conv2d, Graph, ParamStore, Tensor, Var};

pub const LATENT_CHANNELS: usize = 8;
/// Spatial reduction from pixels to latent cells.
pub const DOWNSAMPLE: usize = 4;
/// Fixed output gain so an untrained encoder already spans several quantization steps.
pub const LATENT_GAIN: f64 = 64.0;

/// Three-layer CNN analysis transform, 3 -> 32 -> 64 -> 8 channels, strides 2, 2, 1.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub store: ParamStore,
    layers: [Conv2d; 3],
}

impl EncoderNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = [
            Conv2d::new(&mut store, "encoder.conv1", 3, 32, 3, 2, 1, &mut rng),
            Conv2d::new(&mut store, "encoder.conv2", 32, 64, 3, 2, 1, &mut rng),
            Conv2d::new(&mut store, "encoder.conv3", 64, LATENT_CHANNELS, 3, 1, 1, &mut rng),
        ];
        Self { store, layers }
    }

    /// `[N, 3, H, W] -> [N, 8, H/4, W/4]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, &self.store, x)?;
        let h = g.silu(h)?;
        let h = self.layers[1].forward(g, &self.store, h)?;
        let h = g.silu(h)?;
        let z = self.layers[2].forward(g, &self.store, h)?;
        g.scale(z, LATENT_GAIN)
    }

    /// Real-valued latent `z` of shape `[8, H/4, W/4]`.
    pub fn encode(&self, image: &ImagePlane) -> Result<Tensor> {
        if !image.height().is_multiple_of(DOWNSAMPLE) || !image.width().is_multiple_of(DOWNSAMPLE) {
            return Err(Error::InvalidArgument(format!(
                "encoder input {}x{} is not a multiple of {DOWNSAMPLE}",
                image.height(),
                image.width()
            )));
        }
        let mut g = Graph::inference();
        let x = g.constant(image.to_tensor());
        let z = self.forward(&mut g, x)?;
        let t = g.value(z).clone();
        let s = t.shape().to_vec();
        t.reshape(&s[1..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_shape() {
        let net = EncoderNet::new(1);
        let img = ImagePlane::filled(64, 64, 0.3).unwrap();
        assert_eq!(net.encode(&img).unwrap().shape(), &[8, 16, 16]);
        let img = ImagePlane::filled(16, 16, 0.3).unwrap();
        assert_eq!(net.encode(&img).unwrap().shape(), &[8, 4, 4]);
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_latent() {
        let net = EncoderNet::new(2);
        let z = net.encode(&ImagePlane::filled(32, 32, 0.0).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic() {
        let net = EncoderNet::new(3);
        let img = crate::imaging::synthetic::texture(32, 32, 5);
        assert_eq!(net.encode(&img).unwrap(), net.encode(&img).unwrap());
    }

    #[test]
    fn rejects_unaligned_input() {
        let net = EncoderNet::new(3);
        assert!(net.encode(&ImagePlane::filled(30, 32, 0.0).unwrap()).is_err());
    }
}
