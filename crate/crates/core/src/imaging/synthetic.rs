//! Deterministic procedural test images: piecewise mixtures of flat regions,
//! gradients, gratings, checkerboards and noise, so blocks differ in detail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImagePlane;

fn region_value(kind: u8, y: f64, x: f64, p: &[f64; 6], noise: f64) -> f64 {
    match kind {
        0 => p[0],
        1 => p[0] + (p[1] - 0.5) * (x * p[2] + y * (1.0 - p[2])),
        2 => 0.5 + 0.4 * p[1] * ((x * p[3] + y * p[4]) * 0.9 + p[5] * 6.0).sin(),
        3 => {
            let cell = 2.0 + (p[3] * 6.0).floor();
            if ((x / cell).floor() + (y / cell).floor()) as i64 % 2 == 0 {
                0.2 + 0.2 * p[0]
            } else {
                0.6 + 0.3 * p[1]
            }
        }
        _ => p[0] + 0.35 * (noise - 0.5),
    }
}

/// A `height x width` image whose 4 quadrant-ish regions carry different textures.
pub fn texture(height: usize, width: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regions: Vec<(u8, [f64; 6], [f64; 3])> = (0..4)
        .map(|_| {
            let kind = rng.random_range(0..5u8);
            let p: [f64; 6] = std::array::from_fn(|_| rng.random());
            let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.0));
            (kind, p, tint)
        })
        .collect();
    let split_y = rng.random_range(0.3..0.7) * height as f64;
    let split_x = rng.random_range(0.3..0.7) * width as f64;
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let r = (y as f64 >= split_y) as usize * 2 + (x as f64 >= split_x) as usize;
            let (kind, p, tint) = &regions[r];
            let noise: f64 = rng.random();
            let v = region_value(*kind, y as f64, x as f64, p, noise);
            for t in tint {
                data.push((v * t).clamp(0.0, 1.0));
            }
        }
    }
    ImagePlane::new(height, width, data).expect("valid synthetic image")
}

/// A set of `count` textures, each `size x size`, drawn from consecutive seeds.
pub fn texture_set(count: usize, size: usize, seed: u64) -> Vec<ImagePlane> {
    (0..count as u64)
        .map(|i| texture(size, size, seed.wrapping_mul(1000).wrapping_add(i)))
        .collect()
}
