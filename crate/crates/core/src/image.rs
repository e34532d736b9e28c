//! Planar floating-point images in [0, 1].

use crate::{Error, Result};

/// A `channels × height × width` image stored plane by plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels; expected 1 or 3")));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image, clipping every value into [0, 1].
    pub fn from_clipped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        data.iter_mut().for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(height, width, channels, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if !self.same_dims(other) {
            return Err(Error::InvalidImage("mse: dimension mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64)
    }

    /// Applies `f(c, y, x) -> (source y, source x)` to build a same-channel image.
    fn remap(&self, height: usize, width: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let mut data = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    let (sy, sx) = f(y, x);
                    data.push(self.get(c, sy, sx));
                }
            }
        }
        Image { height, width, channels: self.channels, data }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(self.remap(height, width, |y, x| (top + y, left + x)))
    }

    /// Centered square crop of side `side`.
    pub fn center_crop(&self, side: usize) -> Result<Image> {
        if side > self.height || side > self.width {
            return Err(Error::InvalidImage(format!(
                "image {}x{} smaller than crop {side}",
                self.height, self.width
            )));
        }
        self.crop((self.height - side) / 2, (self.width - side) / 2, side, side)
    }

    pub fn flip_horizontal(&self) -> Image {
        let w = self.width;
        self.remap(self.height, w, |y, x| (y, w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Image {
        let h = self.height;
        self.remap(h, self.width, |y, x| (h - 1 - y, x))
    }

    /// Counter-clockwise rotation by `quarter_turns · 90°`.
    pub fn rotate90(&self, quarter_turns: usize) -> Image {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => self.remap(w, h, |y, x| (x, w - 1 - y)),
            2 => self.remap(h, w, |y, x| (h - 1 - y, w - 1 - x)),
            _ => self.remap(w, h, |y, x| (h - 1 - x, y)),
        }
    }
}
