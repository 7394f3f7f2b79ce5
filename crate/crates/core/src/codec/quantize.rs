use super::encoder::DOWNSAMPLE;
use super::ladder::StepLadder;
use crate::error::{Error, Result};
use crate::imaging::BlockGrid;
use crate::numerics::Tensor;

/// Largest symbol magnitude `L`.
pub const ALPHABET_LIMIT: i32 = 127;

pub fn round_half_away(v: f64) -> f64 {
    // f64::round already rounds ties away from zero
    v.round()
}

/// Integer latent `ẑ` with the block step indices that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Latent cells per block side.
    pub cell_block: usize,
    pub grid_cols: usize,
    pub actions: Vec<usize>,
    /// `[c][y][x]` layout.
    pub symbols: Vec<i32>,
    /// Number of symbols clamped into `[-L, L]`.
    pub clamped: usize,
}

impl QuantizedLatent {
    pub fn num_blocks(&self) -> usize {
        self.actions.len()
    }

    pub fn block_of(&self, y: usize, x: usize) -> usize {
        (y / self.cell_block) * self.grid_cols + x / self.cell_block
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> i32 {
        self.symbols[(c * self.height + y) * self.width + x]
    }

    /// Latent cell coordinates `(y, x)` owned by block `b`, raster order.
    pub fn footprint(&self, b: usize) -> impl Iterator<Item = (usize, usize)> {
        let n = self.cell_block;
        let (y0, x0) = ((b / self.grid_cols) * n, (b % self.grid_cols) * n);
        (0..n * n).map(move |i| (y0 + i / n, x0 + i % n))
    }

    /// `(block, channel, symbol)` triples in coding order: blocks, then channels, then cells.
    pub fn coding_order(&self) -> Vec<(usize, usize, i32)> {
        let mut out = Vec::with_capacity(self.symbols.len());
        for b in 0..self.num_blocks() {
            for c in 0..self.channels {
                for (y, x) in self.footprint(b) {
                    out.push((b, c, self.get(c, y, x)));
                }
            }
        }
        out
    }

    /// `ẑ · Δ(a_b)` as a `[1, C, h, w]` tensor.
    pub fn dequantize(&self, ladder: &StepLadder) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.symbols.len());
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let step = ladder.step(self.actions[self.block_of(y, x)]);
                    data.push(self.get(c, y, x) as f64 * step);
                }
            }
        }
        Tensor::new(&[1, self.channels, self.height, self.width], data)
    }
}

pub(crate) fn latent_dims(z: &Tensor) -> Result<(usize, usize, usize)> {
    match *z.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape {
            op: "quantize",
            shapes: vec![z.shape().to_vec()],
        }),
    }
}

/// Quantize every latent cell with the step of the block that owns it.
pub fn quantize(z: &Tensor, grid: &BlockGrid, actions: &[usize], ladder: &StepLadder) -> Result<QuantizedLatent> {
    let (channels, height, width) = latent_dims(z)?;
    if !grid.block_size.is_multiple_of(DOWNSAMPLE)
        || height * DOWNSAMPLE != grid.padded_height()
        || width * DOWNSAMPLE != grid.padded_width()
    {
        return Err(Error::InvalidArgument(format!(
            "latent {height}x{width} does not match block grid {}x{}",
            grid.padded_height(),
            grid.padded_width()
        )));
    }
    if actions.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "{} actions for {} blocks",
            actions.len(),
            grid.len()
        )));
    }
    if let Some(&a) = actions.iter().find(|&&a| a >= ladder.len()) {
        return Err(Error::InvalidArgument(format!(
            "action {a} outside ladder of {}",
            ladder.len()
        )));
    }
    let mut q = QuantizedLatent {
        channels,
        height,
        width,
        cell_block: grid.block_size / DOWNSAMPLE,
        grid_cols: grid.cols,
        actions: actions.to_vec(),
        symbols: Vec::with_capacity(z.len()),
        clamped: 0,
    };
    let zd = z.data();
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let step = ladder.step(actions[q.block_of(y, x)]);
                let v = round_half_away(zd[(c * height + y) * width + x] / step);
                let s = v.clamp(-ALPHABET_LIMIT as f64, ALPHABET_LIMIT as f64);
                if s != v {
                    q.clamped += 1;
                }
                q.symbols.push(s as i32);
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cell(v: f64, step: f64) -> (i32, f64) {
        let grid = BlockGrid::new(4, 4, 4).unwrap();
        let ladder = StepLadder::new(vec![step]).unwrap();
        let z = Tensor::new(&[1, 1, 1], vec![v]).unwrap();
        let q = quantize(&z, &grid, &[0], &ladder).unwrap();
        (q.symbols[0], q.dequantize(&ladder).unwrap().data()[0])
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(one_cell(1.4, 1.0).0, 1);
        assert_eq!(one_cell(-0.5, 1.0).0, -1);
        assert_eq!(one_cell(0.5, 1.0).0, 1);
        assert_eq!(one_cell(3.0, 0.5), (6, 3.0));
    }

    #[test]
    fn clamping_is_counted() {
        let grid = BlockGrid::new(4, 4, 4).unwrap();
        let ladder = StepLadder::new(vec![0.25]).unwrap();
        let z = Tensor::new(&[2, 1, 1], vec![100.0, -0.1]).unwrap();
        let q = quantize(&z, &grid, &[0], &ladder).unwrap();
        assert_eq!(q.symbols, vec![127, 0]);
        assert_eq!(q.clamped, 1);
    }

    #[test]
    fn each_block_uses_its_own_step() {
        let grid = BlockGrid::new(32, 32, 16).unwrap();
        let ladder = StepLadder::default();
        let z = Tensor::full(&[8, 8, 8], 1.0);
        let q = quantize(&z, &grid, &[0, 2, 3, 4], &ladder).unwrap();
        assert_eq!(q.get(0, 0, 0), 0); // 1/4 rounds to 0
        assert_eq!(q.get(3, 0, 7), 1);
        assert_eq!(q.get(5, 7, 0), 2);
        assert_eq!(q.get(7, 7, 7), 4);
        assert_eq!(q.footprint(3).count(), 16);
        assert_eq!(q.footprint(3).next(), Some((4, 4)));
        assert_eq!(q.coding_order().len(), 8 * 64);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let grid = BlockGrid::new(32, 32, 16).unwrap();
        let z = Tensor::zeros(&[8, 4, 4]);
        assert!(quantize(&z, &grid, &[0; 4], &StepLadder::default()).is_err());
        let z = Tensor::zeros(&[8, 8, 8]);
        assert!(quantize(&z, &grid, &[0; 3], &StepLadder::default()).is_err());
        assert!(quantize(&z, &grid, &[5; 4], &StepLadder::default()).is_err());
    }
}
