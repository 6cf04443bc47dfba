//! Single-channel `f64` frames.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use thiserror::Error;

use crate::autograd::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("buffer of {len} pixels does not match {width}x{height}")]
    BufferLength { width: usize, height: usize, len: usize },
    #[error("image {width}x{height} is not divisible by {factor}")]
    NotDivisible { width: usize, height: usize, factor: usize },
}

/// Row-major grayscale image, nominal range `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BufferLength {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// 8-bit samples mapped to `v / 255`.
    pub fn from_u8(width: usize, height: usize, pixels: &[u8]) -> Result<Self, ImageError> {
        Self::from_vec(width, height, pixels.iter().map(|&p| p as f64 / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Clamped-to-edge lookup with signed coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    /// Bilinear sample at continuous pixel coordinates; `None` outside
    /// `[0, w-1] x [0, h-1]`. Integer coordinates return the stored value
    /// exactly.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let x0 = Float::floor(x);
        let y0 = Float::floor(y);
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as usize, y0 as usize);
        let x1 = (xi + 1).min(self.width - 1);
        let y1 = (yi + 1).min(self.height - 1);
        let top = if fx == 0.0 {
            self.get(xi, yi)
        } else {
            self.get(xi, yi) * (1.0 - fx) + self.get(x1, yi) * fx
        };
        if fy == 0.0 {
            return Some(top);
        }
        let bottom = if fx == 0.0 {
            self.get(xi, y1)
        } else {
            self.get(xi, y1) * (1.0 - fx) + self.get(x1, y1) * fx
        };
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Mean over `factor x factor` blocks.
    pub fn box_downsample(&self, factor: usize) -> Result<Self, ImageError> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(ImageError::NotDivisible {
                width: self.width,
                height: self.height,
                factor,
            });
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        Ok(Self::from_fn(w, h, |x, y| {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += self.get(x * factor + dx, y * factor + dy);
                }
            }
            s * norm
        }))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Separable Gaussian blur with edge clamping; radius `ceil(3 sigma)`.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = Float::ceil(3.0 * sigma) as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| Float::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
            .collect();
        let total: f64 = kernel.iter().sum();
        for k in &mut kernel {
            *k /= total;
        }
        let horiz = Self::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * self.get_clamped(x as isize + i as isize - radius, y as isize))
                .sum()
        });
        Self::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * horiz.get_clamped(x as isize, y as isize + i as isize - radius))
                .sum()
        })
    }

    /// Quantizes `[0, 1]` to 8 bits with rounding and clamping.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| Float::round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    /// `[1, 1, h, w]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("image dims")
    }

    /// Channel `channel` of batch item 0.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, channel: usize) -> Self {
        let [_, _, h, w] = t.shape();
        Self::from_fn(w, h, |x, y| t.at([0, channel, y, x]).as_f64())
    }
}
