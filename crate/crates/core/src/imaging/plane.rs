use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// RGB image with values in `[0, 1]`, stored row-major, channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Image(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    /// Build from arbitrary reals, clamping into `[0, 1]`. Returns the clamped fraction too.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<(Self, f64)> {
        let mut clamped = 0usize;
        for v in data.iter_mut() {
            let c = v.clamp(0.0, 1.0);
            if c != *v {
                clamped += 1;
            }
            *v = c;
        }
        let frac = clamped as f64 / data.len().max(1) as f64;
        Ok((Self::new(height, width, data)?, frac))
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// 8-bit quantization, round to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Per-pixel luma `(R + G + B) / 3`, row-major.
    pub fn luma(&self) -> Vec<f64> {
        self.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.pixels();
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        Tensor::new(&[1, 3, self.height, self.width], out).expect("image tensor shape")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor), values clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<(Self, f64)> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::Shape {
                op: "image_from_tensor",
                shapes: vec![s.to_vec()],
            });
        }
        let (h, w) = (s[2], s[3]);
        let hw = h * w;
        let d = t.data();
        let data = (0..hw).flat_map(|i| (0..3).map(move |c| d[c * hw + i])).collect();
        Self::from_clamped(h, w, data)
    }

    /// Replicate-pad on the bottom/right to `height x width`.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Self {
        assert!(height >= self.height && width >= self.width);
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let sy = y.min(self.height - 1);
            for x in 0..width {
                let sx = x.min(self.width - 1);
                let i = (sy * self.width + sx) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Self { height, width, data }
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} from {}x{}",
                self.height, self.width
            )));
        }
        self.crop_at(0, 0, height, width)
    }

    /// `height x width` window whose top-left corner is `(y0, x0)`.
    pub fn crop_at(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width}+{y0}+{x0} from {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Self { height, width, data })
    }
}
