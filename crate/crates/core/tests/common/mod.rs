#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_iqa::{ArchConfig, Image, QualityModel};

pub fn tiny_arch(seed: u64) -> ArchConfig {
    ArchConfig {
        widths: vec![4, 8],
        crop: 16,
        proj_hidden: 8,
        proj_dim: 8,
        regressor_hidden: 8,
        seed,
        ..ArchConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> QualityModel {
    QualityModel::build(tiny_arch(seed)).unwrap()
}

/// Smooth random texture with values inside [0.1, 0.9].
pub fn texture(side: usize, channels: usize, rng: &mut impl Rng) -> Image {
    let (fx, fy) = (rng.random_range(0.2..1.2), rng.random_range(0.2..1.2));
    let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let mut data = Vec::with_capacity(side * side * channels);
    for c in 0..channels {
        let off = rng.random_range(-0.1..0.1);
        for y in 0..side {
            for x in 0..side {
                let v = 0.5 + 0.3 * ((x as f64 * fx + px).sin() * (y as f64 * fy + py + c as f64).cos()) + off;
                data.push(v.clamp(0.1, 0.9));
            }
        }
    }
    Image::new(side, side, channels, data).unwrap()
}

pub fn textures(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| texture(side, 3, &mut rng)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
