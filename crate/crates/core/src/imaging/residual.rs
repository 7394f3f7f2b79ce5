use super::{Block, ImagePlane};

/// Activity threshold on `|h|` used by the fourth block statistic.
pub const ACTIVITY_THRESHOLD: f64 = 0.05;

/// Single-channel high-pass residual `h = H(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ResidualMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// 4-neighbour Laplacian `[[0,-1,0],[-1,4,-1],[0,-1,0]]` of the luma, replicate boundary.
pub fn highpass(image: &ImagePlane) -> ResidualMap {
    let (h, w) = (image.height(), image.width());
    let luma = image.luma();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        luma[y * w + x]
    };
    let mut data = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            data[y as usize * w + x as usize] =
                4.0 * at(y, x) - at(y - 1, x) - at(y + 1, x) - at(y, x - 1) - at(y, x + 1);
        }
    }
    ResidualMap {
        height: h,
        width: w,
        data,
    }
}

/// `[mean |h|, std h, max |h|, fraction |h| > tau]` over one block.
pub fn block_stats(residual: &ResidualMap, block: &Block) -> [f64; 4] {
    let n = (block.size * block.size) as f64;
    let (mut sum_abs, mut sum, mut sum_sq, mut max_abs, mut active) = (0.0, 0.0, 0.0, 0.0f64, 0usize);
    for y in block.y0..block.y0 + block.size {
        for x in block.x0..block.x0 + block.size {
            let v = residual.get(y, x);
            sum_abs += v.abs();
            sum += v;
            sum_sq += v * v;
            max_abs = max_abs.max(v.abs());
            if v.abs() > ACTIVITY_THRESHOLD {
                active += 1;
            }
        }
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    [sum_abs / n, var.sqrt(), max_abs, active as f64 / n]
}
