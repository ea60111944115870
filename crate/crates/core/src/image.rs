//! Pixel grids in `[0, 1]`, stored height × width × channels.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Invalid(format!(
                "bad image geometry {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
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

    fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = self.offset(y, x);
        &self.data[o..o + self.channels]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, value: &[f64]) {
        let o = self.offset(y, x);
        for (d, v) in self.data[o..o + self.channels].iter_mut().zip(value) {
            *d = v.clamp(0.0, 1.0);
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    /// Zero-pads by `pad` on every side, then crops the original size at
    /// offset `(dy, dx)` of the padded grid. `(pad, pad)` is the identity.
    pub fn pad_crop(&self, pad: usize, dy: usize, dx: usize) -> Self {
        let mut out = Self::filled(self.height, self.width, self.channels, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = ((y + dy) as isize - pad as isize, (x + dx) as isize - pad as isize);
                if sy >= 0 && sx >= 0 && (sy as usize) < self.height && (sx as usize) < self.width {
                    out.set_pixel(y, x, self.pixel(sy as usize, sx as usize));
                }
            }
        }
        out
    }

    pub fn fill_rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, value: f64) {
        let v = vec![value; self.channels];
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set_pixel(y, x, &v);
            }
        }
    }

    /// Per-channel mean.
    pub fn mean_color(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n)
            .collect()
    }

    /// Replicates a single channel three times.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        Self {
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }
}
