//! Synthetic degradations used by the rank objective, plus the
//! quality-preserving augmentations applied before adaptation.

use crate::image::Image;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Blur,
    Compression,
    Noise,
}

impl DistortionKind {
    /// Fixed order, also the tie-break order for type selection.
    pub const ALL: [DistortionKind; 3] = [DistortionKind::Blur, DistortionKind::Compression, DistortionKind::Noise];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::Blur => "blur",
            DistortionKind::Compression => "compression",
            DistortionKind::Noise => "noise",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "blur" => Ok(DistortionKind::Blur),
            "compression" | "jpeg" => Ok(DistortionKind::Compression),
            "noise" => Ok(DistortionKind::Noise),
            other => Err(Error::Config(vec![format!("unknown distortion kind `{other}`")])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    High,
    Low,
}

/// Blur σ for heavy / light degradation.
pub const BLUR_SIGMA_HIGH: (f64, f64) = (40.0, 80.0);
pub const BLUR_SIGMA_LOW: (f64, f64) = (1.0, 20.0);
/// Compression quality factor; a lower factor is a heavier degradation.
pub const COMPRESSION_Q_HIGH: (u32, u32) = (30, 60);
pub const COMPRESSION_Q_LOW: (u32, u32) = (80, 95);
/// Additive Gaussian noise variance.
pub const NOISE_VAR_HIGH: (f64, f64) = (0.05, 0.1);
pub const NOISE_VAR_LOW: (f64, f64) = (0.005, 0.01);
pub const BLUR_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: Level,
    /// σ for blur, quality factor for compression, variance for noise.
    pub sampled_param: f64,
}

impl DistortionSpec {
    pub fn sample<R: Rng + ?Sized>(kind: DistortionKind, level: Level, rng: &mut R) -> Self {
        let sampled_param = match (kind, level) {
            (DistortionKind::Blur, Level::High) => rng.random_range(BLUR_SIGMA_HIGH.0..=BLUR_SIGMA_HIGH.1),
            (DistortionKind::Blur, Level::Low) => rng.random_range(BLUR_SIGMA_LOW.0..=BLUR_SIGMA_LOW.1),
            (DistortionKind::Compression, Level::High) => {
                rng.random_range(COMPRESSION_Q_HIGH.0..=COMPRESSION_Q_HIGH.1) as f64
            }
            (DistortionKind::Compression, Level::Low) => {
                rng.random_range(COMPRESSION_Q_LOW.0..=COMPRESSION_Q_LOW.1) as f64
            }
            (DistortionKind::Noise, Level::High) => rng.random_range(NOISE_VAR_HIGH.0..=NOISE_VAR_HIGH.1),
            (DistortionKind::Noise, Level::Low) => rng.random_range(NOISE_VAR_LOW.0..=NOISE_VAR_LOW.1),
        };
        Self { kind, level, sampled_param }
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Result<Image> {
        match self.kind {
            DistortionKind::Blur => gaussian_blur(img, self.sampled_param, BLUR_KERNEL),
            DistortionKind::Compression => compress(img, self.sampled_param.round() as u32),
            DistortionKind::Noise => add_noise(img, self.sampled_param, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistortionTriplet {
    pub original: Image,
    pub high: Image,
    pub low: Image,
    pub kind: DistortionKind,
    pub high_spec: DistortionSpec,
    pub low_spec: DistortionSpec,
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    if ksize % 2 == 0 || ksize == 0 {
        return Err(Error::InvalidArgument(format!("gaussian_blur: kernel size {ksize} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian_blur: sigma {sigma} must be positive")));
    }
    let r = (ksize / 2) as isize;
    let taps: Vec<f64> = (-r..=r).map(|o| (-((o * o) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / s).collect())
}

/// Full `ksize × ksize` kernel, row-major.
pub fn gaussian_kernel_2d(sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    let k = gaussian_kernel_1d(sigma, ksize)?;
    Ok(k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect())
}

/// Separable Gaussian blur with edge replication at the borders.
pub fn gaussian_blur(img: &Image, sigma: f64, ksize: usize) -> Result<Image> {
    let k = gaussian_kernel_1d(sigma, ksize)?;
    let (h, w) = (img.height(), img.width());
    if h < ksize || w < ksize {
        return Err(Error::InvalidImage(format!("gaussian_blur: image {h}x{w} smaller than kernel {ksize}")));
    }
    let r = (ksize / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(img.data().len());
    let mut tmp = vec![0.0; h * w];
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| kv * plane[y * w + clampi(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.push(
                    k.iter()
                        .enumerate()
                        .map(|(i, &kv)| kv * tmp[clampi(y as isize + i as isize - r, h) * w + x])
                        .sum(),
                );
            }
        }
    }
    Image::from_clipped(h, w, img.channels(), out)
}

/// Standard JPEG luminance quantization table (row-major).
pub const LUMA_QUANT_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Multiplier applied to the quantization table for quality factor `q`.
pub fn quant_scale(q: u32) -> f64 {
    let s = if q < 50 { 5000.0 / q as f64 } else { 200.0 - 2.0 * q as f64 };
    s / 100.0
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    m
}

/// Block-DCT quantization surrogate of JPEG compression.
///
/// Each channel is split into 8×8 blocks (partial blocks padded by edge
/// replication), transformed with an orthonormal DCT in 0–255 units,
/// quantized with `max(1, table · quant_scale(q))` step sizes, and
/// reconstructed.
pub fn compress(img: &Image, quality_factor: u32) -> Result<Image> {
    if !(1..=100).contains(&quality_factor) {
        return Err(Error::InvalidArgument(format!("compress: quality factor {quality_factor} outside [1,100]")));
    }
    let (h, w) = (img.height(), img.width());
    if h < 8 || w < 8 {
        return Err(Error::InvalidImage(format!("compress: image {h}x{w} smaller than 8x8")));
    }
    let s = quant_scale(quality_factor);
    let steps: Vec<f64> = LUMA_QUANT_TABLE.iter().map(|t| (t * s).max(1.0)).collect();
    let d = dct_matrix();
    let mut out = vec![0.0; img.data().len()];
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let base = c * h * w;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        *v = plane[sy * w + sx] * 255.0 - 128.0;
                    }
                }
                // forward: D · B · Dᵀ
                for u in 0..8 {
                    for x in 0..8 {
                        tmp[u][x] = (0..8).map(|y| d[u][y] * block[y][x]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let coef: f64 = (0..8).map(|x| tmp[u][x] * d[v][x]).sum();
                        let q = steps[u * 8 + v];
                        block[u][v] = (coef / q).round() * q;
                    }
                }
                // inverse: Dᵀ · C · D
                for y in 0..8 {
                    for v in 0..8 {
                        tmp[y][v] = (0..8).map(|u| d[u][y] * block[u][v]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let (py, px) = (by + y, bx + x);
                        if py < h && px < w {
                            let val: f64 = (0..8).map(|v| tmp[y][v] * d[v][x]).sum();
                            out[base + py * w + px] = (val + 128.0) / 255.0;
                        }
                    }
                }
            }
        }
    }
    Image::from_clipped(h, w, img.channels(), out)
}

/// Zero-mean Gaussian noise, one draw per pixel location shared by all
/// channels, followed by clipping.
pub fn add_noise<R: Rng + ?Sized>(img: &Image, variance: f64, rng: &mut R) -> Result<Image> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::InvalidArgument(format!("add_noise: variance {variance} must be positive")));
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = img.height() * img.width();
    let draws: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let data: Vec<f64> = img.data().iter().enumerate().map(|(i, &v)| v + draws[i % n]).collect();
    Image::from_clipped(img.height(), img.width(), img.channels(), data)
}

/// High- and low-level degradations of one kind, sampled from the fixed ranges.
pub fn make_triplet<R: Rng + ?Sized>(img: &Image, kind: DistortionKind, rng: &mut R) -> Result<DistortionTriplet> {
    let high_spec = DistortionSpec::sample(kind, Level::High, rng);
    let low_spec = DistortionSpec::sample(kind, Level::Low, rng);
    let high = high_spec.apply(img, rng)?;
    let low = low_spec.apply(img, rng)?;
    Ok(DistortionTriplet { original: img.clone(), high, low, kind, high_spec, low_spec })
}

/// Random square crop followed by independent horizontal and vertical flips.
pub fn quality_preserving_augment<R: Rng + ?Sized>(img: &Image, crop: usize, rng: &mut R) -> Result<Image> {
    if img.height() < crop || img.width() < crop || crop == 0 {
        return Err(Error::InvalidImage(format!(
            "augment: image {}x{} smaller than crop {crop}",
            img.height(),
            img.width()
        )));
    }
    let top = rng.random_range(0..=img.height() - crop);
    let left = rng.random_range(0..=img.width() - crop);
    let mut out = img.crop(top, left, crop, crop)?;
    if rng.random_bool(0.5) {
        out = out.flip_horizontal();
    }
    if rng.random_bool(0.5) {
        out = out.flip_vertical();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient(h: usize, w: usize) -> Image {
        let mut d = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    d.push(((x + 2 * y + 7 * c) % (h + w)) as f64 / (h + w) as f64);
                }
            }
        }
        Image::new(h, w, 3, d).unwrap()
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::constant(12, 10, 3, 0.4).unwrap();
        for sigma in [0.5, 3.0, 60.0] {
            let out = gaussian_blur(&img, sigma, 5).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        }
    }

    #[test]
    fn wide_sigma_kernel_is_near_uniform() {
        let k = gaussian_kernel_2d(60.0, 5).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let max = k.iter().cloned().fold(f64::MIN, f64::max);
        let min = k.iter().cloned().fold(f64::MAX, f64::min);
        // corner offset (2,2): exp(8 / (2·3600)) ≈ 1.00111
        assert!(max / min < 1.01, "{}", max / min);
        assert!((max / min - (8.0f64 / 7200.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_energy_away_from_borders() {
        let mut d = vec![0.0; 21 * 21];
        d[10 * 21 + 10] = 1.0;
        let img = Image::new(21, 21, 1, d).unwrap();
        let out = gaussian_blur(&img, 1.0, 5).unwrap();
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn even_kernel_rejected() {
        let img = Image::constant(8, 8, 1, 0.5).unwrap();
        assert!(gaussian_blur(&img, 1.0, 4).is_err());
        assert!(gaussian_blur(&Image::constant(3, 8, 1, 0.5).unwrap(), 1.0, 5).is_err());
    }

    #[test]
    fn quant_scale_rule() {
        assert_eq!(quant_scale(50), 1.0);
        assert_eq!(quant_scale(90), 0.2);
        assert_eq!(quant_scale(25), 2.0);
    }

    #[test]
    fn constant_image_only_dc_error() {
        for q in [30u32, 50, 90] {
            let img = Image::constant(16, 24, 1, 0.37).unwrap();
            let out = compress(&img, q).unwrap();
            let bound = LUMA_QUANT_TABLE[0] * quant_scale(q) / 16.0 / 255.0;
            let err = out.data().iter().map(|v| (v - 0.37).abs()).fold(0.0, f64::max);
            assert!(err <= bound + 1e-12, "q={q} err={err} bound={bound}");
            // all pixels share one value: only DC survives
            let first = out.data()[0];
            assert!(out.data().iter().all(|v| (v - first).abs() < 1e-9));
        }
    }

    #[test]
    fn compression_error_grows_with_lower_quality() {
        let img = gradient(32, 32);
        let mae = |q| {
            let out = compress(&img, q).unwrap();
            out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.data().len() as f64
        };
        assert!(mae(30) > mae(90));
    }

    #[test]
    fn compress_rejects_small_images() {
        assert!(compress(&Image::constant(7, 16, 1, 0.5).unwrap(), 50).is_err());
        assert!(compress(&Image::constant(8, 8, 1, 0.5).unwrap(), 0).is_err());
    }

    #[test]
    fn noise_variance_matches() {
        let img = Image::constant(256, 256, 1, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = add_noise(&img, 0.01, &mut rng).unwrap();
        let diffs: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        assert!((0.009..=0.011).contains(&var), "{var}");
    }

    #[test]
    fn noise_is_seeded() {
        let img = gradient(16, 16);
        let a = add_noise(&img, 0.05, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = add_noise(&img, 0.05, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_clips_at_one() {
        let img = Image::constant(64, 64, 1, 0.99).unwrap();
        let out = add_noise(&img, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn triplet_parameters_in_range() {
        let img = gradient(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = make_triplet(&img, DistortionKind::Noise, &mut rng).unwrap();
            assert!((0.05..=0.1).contains(&t.high_spec.sampled_param));
            assert!((0.005..=0.01).contains(&t.low_spec.sampled_param));
            let t = make_triplet(&img, DistortionKind::Blur, &mut rng).unwrap();
            assert!((40.0..=80.0).contains(&t.high_spec.sampled_param));
            assert!((1.0..=20.0).contains(&t.low_spec.sampled_param));
            assert_ne!(t.high, t.low);
            let t = make_triplet(&img, DistortionKind::Compression, &mut rng).unwrap();
            assert!((30.0..=60.0).contains(&t.high_spec.sampled_param));
            assert!((80.0..=95.0).contains(&t.low_spec.sampled_param));
        }
    }

    #[test]
    fn augment_shapes_and_identity_case() {
        let img = gradient(20, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = quality_preserving_augment(&img, 12, &mut rng).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (12, 12, 3));
        // full-size crop: pixel multiset preserved whatever the flips
        let full = quality_preserving_augment(&img, 20, &mut rng).unwrap();
        let mut a = full.data().to_vec();
        let mut b = img.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert!(quality_preserving_augment(&img, 21, &mut rng).is_err());
    }
}
