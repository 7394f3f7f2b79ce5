//! MSE/PSNR, single-scale SSIM, perceptual proxies and the weighted utility.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imaging::ImagePlane;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const LPIPS_PROXY_SEED: u64 = 0xC0DEC;
const PROXY_FILTERS: usize = 8;
const PROXY_SCALES: usize = 3;
const DISTS_C1: f64 = 4e-3;
const DISTS_C2: f64 = 1e-4;

fn check_dims(op: &'static str, x: &ImagePlane, y: &ImagePlane) -> Result<()> {
    if !x.same_dims(y) {
        return Err(Error::Shape {
            op,
            shapes: vec![vec![x.height(), x.width(), 3], vec![y.height(), y.width(), 3]],
        });
    }
    Ok(())
}

pub fn mse(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    check_dims("mse", x, y)?;
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM on luma, 11x11 Gaussian window (σ = 1.5), mean over valid positions.
pub fn ssim(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    check_dims("ssim", x, y)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least 11x11 pixels, got {h}x{w}"
        )));
    }
    let (a, b) = (x.luma(), y.luma());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let (mx, _, _) = filter_valid(&a, h, w, &k);
    let (my, _, _) = filter_valid(&b, h, w, &k);
    let (sxx, _, _) = filter_valid(&prod(&a, &a), h, w, &k);
    let (syy, _, _) = filter_valid(&prod(&b, &b), h, w, &k);
    let (sxy, _, _) = filter_valid(&prod(&a, &b), h, w, &k);
    let n = mx.len() as f64;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (sxx[i] - ux * ux, syy[i] - uy * uy, sxy[i] - ux * uy);
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n)
}

/// A distance between two images, `d(x, x) = 0`, symmetric and non-negative.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, x: &ImagePlane, y: &ImagePlane) -> Result<f64>;
}

/// 2x2 average pooling of a channel-major `[c][h][w]` stack.
fn pool2(planes: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let at = |yy: usize, xx: usize| planes[(ch * h + yy) * w + xx];
                out[(ch * oh + y) * ow + x] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    (out, oh, ow)
}

fn channel_major(img: &ImagePlane) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = px[c];
        }
    }
    out
}

/// Random-feature stand-in for LPIPS: fixed unit-norm 3x3x3 filters at three scales.
#[derive(Clone, Debug)]
pub struct LpipsProxy {
    filters: Vec<[f64; 27]>,
}

impl Default for LpipsProxy {
    fn default() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LPIPS_PROXY_SEED);
        let filters = (0..PROXY_FILTERS)
            .map(|_| {
                let mut f = [0.0; 27];
                for v in f.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                f.iter_mut().for_each(|v| *v /= norm);
                f
            })
            .collect();
        Self { filters }
    }
}

impl LpipsProxy {
    fn features(&self, planes: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (h.saturating_sub(2), w.saturating_sub(2));
        let mut out = Vec::with_capacity(self.filters.len() * oh * ow);
        for f in &self.filters {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                acc += f[c * 9 + dy * 3 + dx] * planes[(c * h + y + dy) * w + x + dx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }
}

impl PerceptualMetric for LpipsProxy {
    fn name(&self) -> &str {
        "lpips_proxy"
    }

    fn distance(&self, x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
        check_dims("lpips_proxy", x, y)?;
        let (mut a, mut b) = (channel_major(x), channel_major(y));
        let (mut h, mut w) = (x.height(), x.width());
        let mut total = 0.0;
        let mut scales = 0;
        for s in 0..PROXY_SCALES {
            if s > 0 {
                (a, _, _) = pool2(&a, 3, h, w);
                let (pb, ph, pw) = pool2(&b, 3, h, w);
                (b, h, w) = (pb, ph, pw);
            }
            if h < 3 || w < 3 {
                break;
            }
            let (fa, fb) = (self.features(&a, h, w), self.features(&b, h, w));
            total += fa.iter().zip(&fb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / fa.len() as f64;
            scales += 1;
        }
        Ok(total / scales.max(1) as f64)
    }
}

/// Structure/texture stand-in for DISTS: gradient-magnitude agreement times local-mean agreement.
#[derive(Clone, Copy, Debug, Default)]
pub struct DistsProxy;

fn gradient_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| p[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (at(y, x + 1) - at(y, x - 1));
            let gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn similarity(a: &[f64], b: &[f64], c: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (2.0 * p * q + c) / (p * p + q * q + c))
        .sum::<f64>()
        / a.len() as f64
}

impl PerceptualMetric for DistsProxy {
    fn name(&self) -> &str {
        "dists_proxy"
    }

    fn distance(&self, x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
        check_dims("dists_proxy", x, y)?;
        let (mut a, mut b) = (x.luma(), y.luma());
        let (mut h, mut w) = (x.height(), x.width());
        let boxk = [1.0 / 3.0; 3];
        let mut total = 0.0;
        let mut scales = 0;
        for s in 0..PROXY_SCALES {
            if s > 0 {
                (a, _, _) = pool2(&a, 1, h, w);
                let (pb, ph, pw) = pool2(&b, 1, h, w);
                (b, h, w) = (pb, ph, pw);
            }
            if h < 3 || w < 3 {
                break;
            }
            let (ma, mh, mw) = filter_valid(&a, h, w, &boxk);
            let (mb, _, _) = filter_valid(&b, h, w, &boxk);
            let structure = similarity(
                &gradient_magnitude(&ma, mh, mw),
                &gradient_magnitude(&mb, mh, mw),
                DISTS_C1,
            );
            let texture = similarity(&ma, &mb, DISTS_C2);
            total += structure * texture;
            scales += 1;
        }
        Ok((1.0 - total / scales.max(1) as f64).max(0.0))
    }
}

/// Weights of the utility; defaults are `λ_p = 1.0, λ_s = 0.5, λ_l = 0.2, λ_d = 0.2`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct UtilityWeights {
    pub mse: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub dists: f64,
}

impl Default for UtilityWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            ssim: 0.5,
            lpips: 0.2,
            dists: 0.2,
        }
    }
}

impl UtilityWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.mse, self.ssim, self.lpips, self.dists]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "utility weights must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `U = -λ_p D - λ_s (1 - SSIM) - λ_l L - λ_d T`.
pub fn utility(weights: &UtilityWeights, mse: f64, ssim: f64, lpips: f64, dists: f64) -> f64 {
    -weights.mse * mse - weights.ssim * (1.0 - ssim) - weights.lpips * lpips - weights.dists * dists
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips_proxy: f64,
    pub dists_proxy: f64,
    pub utility: f64,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 6] = ["mse", "psnr_db", "ssim", "lpips_proxy", "dists_proxy", "utility"];

    pub fn csv_row(&self) -> [String; 6] {
        [
            self.mse,
            self.psnr_db,
            self.ssim,
            self.lpips_proxy,
            self.dists_proxy,
            self.utility,
        ]
        .map(|v| format!("{v}"))
    }
}

/// Full metric set with pluggable perceptual distances.
pub struct MetricSuite {
    pub weights: UtilityWeights,
    pub lpips: Box<dyn PerceptualMetric>,
    pub dists: Box<dyn PerceptualMetric>,
}

impl Default for MetricSuite {
    fn default() -> Self {
        Self::new(UtilityWeights::default())
    }
}

impl std::fmt::Debug for MetricSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricSuite")
            .field("weights", &self.weights)
            .field("lpips", &self.lpips.name())
            .field("dists", &self.dists.name())
            .finish()
    }
}

impl MetricSuite {
    pub fn new(weights: UtilityWeights) -> Self {
        Self {
            weights,
            lpips: Box::new(LpipsProxy::default()),
            dists: Box::new(DistsProxy),
        }
    }

    pub fn evaluate(&self, reference: &ImagePlane, recon: &ImagePlane) -> Result<MetricReport> {
        self.weights.validate()?;
        let m = mse(reference, recon)?;
        let s = ssim(reference, recon)?;
        let l = self.lpips.distance(reference, recon)?;
        let d = self.dists.distance(reference, recon)?;
        Ok(MetricReport {
            mse: m,
            psnr_db: psnr_from_mse(m),
            ssim: s,
            lpips_proxy: l,
            dists_proxy: d,
            utility: utility(&self.weights, m, s, l, d),
        })
    }
}
