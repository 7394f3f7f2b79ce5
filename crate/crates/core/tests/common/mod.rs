#![allow(dead_code)]

pub mod gradcheck;

use std::path::PathBuf;

use pcdc::codec::{gaussian_model, quantize, serialize, Bitstream, EntropyModel, StepLadder, SymbolModel};
use pcdc::imaging::BlockGrid;
use pcdc::numerics::Tensor;
use rand::Rng;

pub const BLESS_VAR: &str = "PCDC_BLESS";

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub struct GoldenCase {
    pub name: &'static str,
    pub height: usize,
    pub width: usize,
    pub block_size: usize,
    pub ladder: StepLadder,
    pub model: EntropyModel,
    pub z: Tensor,
    pub actions: Vec<usize>,
}

/// Closed-form latents so the fixtures do not depend on any RNG.
fn latent(channels: usize, h: usize, w: usize, amp: f64, spikes: bool) -> Tensor {
    let mut data = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let (cf, yf, xf) = (c as f64, y as f64, x as f64);
                let mut v = amp * ((0.7 * cf + 1.3 * yf + 0.37 * xf).sin() + 0.5 * (0.11 * cf * xf - 0.9 * yf).cos());
                if spikes && (c + 3 * y + 5 * x) % 17 == 0 {
                    v *= 40.0;
                }
                data.push(v);
            }
        }
    }
    Tensor::new(&[channels, h, w], data).unwrap()
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let sig = |scale: f64| EntropyModel::new((1..=8).map(|c| scale * c as f64 / 4.0).collect()).unwrap();
    vec![
        GoldenCase {
            name: "square_k5",
            height: 32,
            width: 32,
            block_size: 16,
            ladder: StepLadder::truncated(5).unwrap(),
            model: sig(1.5),
            z: latent(8, 8, 8, 2.0, false),
            actions: vec![0, 1, 2, 4],
        },
        GoldenCase {
            name: "padded_k3",
            height: 40,
            width: 24,
            block_size: 8,
            ladder: StepLadder::truncated(3).unwrap(),
            model: sig(0.8),
            z: latent(8, 10, 6, 3.0, false),
            actions: (0..15).map(|b| (b * 7 + 1) % 3).collect(),
        },
        GoldenCase {
            name: "escapes_k5",
            height: 16,
            width: 48,
            block_size: 16,
            ladder: StepLadder::truncated(5).unwrap(),
            model: sig(0.3),
            z: latent(8, 4, 12, 1.0, true),
            actions: vec![4, 4, 3],
        },
    ]
}

impl GoldenCase {
    pub fn encode(&self) -> Bitstream {
        let grid = BlockGrid::new(self.height, self.width, self.block_size).unwrap();
        let q = quantize(&self.z, &grid, &self.actions, &self.ladder).unwrap();
        serialize(&q, self.height, self.width, self.block_size, &self.model, &self.ladder).unwrap()
    }

    pub fn path(&self) -> PathBuf {
        golden_dir().join(format!("{}.pcdc", self.name))
    }
}

/// Compare against the committed file, rewriting it when `PCDC_BLESS` is set.
pub fn check_golden(path: &std::path::Path, bytes: &[u8]) -> Result<(), String> {
    if std::env::var_os(BLESS_VAR).is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, bytes).unwrap();
        return Ok(());
    }
    let want = std::fs::read(path).map_err(|e| format!("{}: {e} (set {BLESS_VAR}=1 to create)", path.display()))?;
    if want != bytes {
        let at = want
            .iter()
            .zip(bytes)
            .position(|(a, b)| a != b)
            .unwrap_or(want.len().min(bytes.len()));
        return Err(format!(
            "{}: {} bytes committed, {} produced, first difference at byte {at}",
            path.display(),
            want.len(),
            bytes.len()
        ));
    }
    Ok(())
}

pub fn random_model(rng: &mut impl Rng) -> SymbolModel {
    if rng.random_bool(0.5) {
        gaussian_model(rng.random_range(0.05..30.0)).unwrap()
    } else {
        let n = rng.random_range(1..300);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(4) + 1e-9).collect();
        let total: f64 = raw.iter().sum();
        let pmf = raw.iter().map(|p| p / total).collect();
        SymbolModel::from_pmf(rng.random_range(-200..50), pmf).unwrap()
    }
}

pub fn draw(model: &SymbolModel, rng: &mut impl Rng) -> i32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in model.pmf().iter().enumerate() {
        acc += p;
        if u < acc {
            return model.min_symbol() + i as i32;
        }
    }
    model.max_symbol()
}

pub fn random_case(rng: &mut impl Rng) -> (usize, usize, usize, StepLadder, EntropyModel, Tensor, Vec<usize>) {
    let block = [4, 8, 16][rng.random_range(0..3)];
    let (h, w) = (rng.random_range(1..50), rng.random_range(1..50));
    let grid = BlockGrid::new(h, w, block).unwrap();
    let k = rng.random_range(1..=5);
    let ladder = StepLadder::truncated(k).unwrap();
    let channels = 8;
    let model = EntropyModel::new((0..channels).map(|_| rng.random_range(0.05..20.0)).collect()).unwrap();
    let (lh, lw) = (grid.padded_height() / 4, grid.padded_width() / 4);
    let scale = rng.random_range(0.1..20.0);
    let z = Tensor::randn(&[channels, lh, lw], rng).map(|v| v * scale);
    let actions = (0..grid.len()).map(|_| rng.random_range(0..k)).collect();
    (h, w, block, ladder, model, z, actions)
}
