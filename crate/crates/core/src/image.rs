//! Owned pixel grids and bilinear resampling.

use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Row-major `height × width × channels` pixel buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            bail!(Input, "empty image {width}x{height}x{channels}");
        }
        if data.len() != width * height * channels {
            bail!(
                Input,
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            );
        }
        if data.iter().any(|v| !v.is_finite()) {
            bail!(Input, "image contains non-finite pixels");
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, channel)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear resize with corner-aligned sampling: output pixel `x` reads
    /// source coordinate `x · (W_in − 1) / (W_out − 1)`, so resizing to the
    /// same size is the identity.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Input, "cannot resize to {width}x{height}");
        }
        let xs = axis_samples(self.width, width);
        let ys = axis_samples(self.height, height);
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let p = |x: usize, y: usize| self.data[(y * self.width + x) * c + ch];
                    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Ok(Self {
            width,
            height,
            channels: c,
            data,
        })
    }

    /// Copies the `width × height` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            bail!(
                Input,
                "crop {width}x{height}+{x}+{y} outside {}x{}",
                self.width,
                self.height
            );
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for row in y..y + height {
            let start = (row * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self {
            width,
            height,
            channels: c,
            data,
        })
    }
}

/// `(lower index, upper index, upper weight)` per output position.
fn axis_samples(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = if n_out == 1 {
                (n_in - 1) as f64 * 0.5
            } else {
                (i * (n_in - 1)) as f64 / (n_out - 1) as f64
            };
            let lo = (libm::floor(src) as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let img = Image::from_fn(7, 5, 3, |x, y, c| (x * 31 + y * 7 + c) as f64 / 100.0).unwrap();
        assert_eq!(img.resize_bilinear(7, 5).unwrap(), img);
    }

    #[test]
    fn resize_interpolates_linearly() {
        let img = Image::new(2, 1, 1, alloc::vec![0.0, 1.0]).unwrap();
        let r = img.resize_bilinear(5, 1).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn rejects_empty() {
        assert!(Image::new(0, 3, 3, alloc::vec![]).is_err());
    }
}
