//! Full-reference image metrics and the temporal warping error.

use alloc::vec::Vec;

use num_traits::Float;
use thiserror::Error;

use crate::flow::{warp_image, FlowError, FlowField, Mask};
use crate::image::GrayImage;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("image {0:?} is smaller than the 11x11 window")]
    TooSmall((usize, usize)),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

fn check(a: (usize, usize), b: (usize, usize)) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::DimensionMismatch { a, b });
    }
    Ok(())
}

pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64, MetricError> {
    check(a.dims(), b.dims())?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(peak^2 / mse)`, or [`PSNR_CAP`] when the images are identical.
pub fn psnr(a: &GrayImage, b: &GrayImage, peak: f64) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * Float::log10(peak * peak / m))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = Float::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable weighted sums over every fully contained window.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut horiz = Vec::with_capacity(ow * h);
    for y in 0..h {
        for x in 0..ow {
            horiz.push((0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum::<f64>());
        }
    }
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            out.push((0..SSIM_WINDOW).map(|i| k[i] * horiz[(y + i) * ow + x]).sum::<f64>());
        }
    }
    out
}

/// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), peak 1, mean over
/// valid windows.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64, MetricError> {
    check(a.dims(), b.dims())?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall((w, h)));
    }
    let k = ssim_kernel();
    let (x, y) = (a.data(), b.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let sxx = filter_valid(&xx, w, h, &k);
    let syy = filter_valid(&yy, w, h, &k);
    let sxy = filter_valid(&xy, w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len() as f64;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n)
}

/// Warping error and whether the effective mask was empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpError {
    pub value: f64,
    pub degenerate: bool,
}

/// Masked mean of `(F_t - warp(F_{t+1}, flow))^2`. Pixels whose warp sample
/// falls outside the frame are excluded along with `mask == 0`. An empty
/// mask yields 0 with `degenerate` set.
pub fn warp_error(current: &GrayImage, next: &GrayImage, flow: &FlowField, mask: &Mask) -> Result<WarpError, MetricError> {
    check(current.dims(), next.dims())?;
    check(current.dims(), flow.dims())?;
    check(current.dims(), mask.dims())?;
    let (warped, valid) = warp_image(next, flow)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (&m, &v)) in mask.data().iter().zip(valid.data()).enumerate() {
        if m && v {
            let d = current.data()[i] - warped.data()[i];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(WarpError {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(WarpError {
        value: sum / count as f64,
        degenerate: false,
    })
}

/// Metrics of one output frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    /// Warping error against the next frame, when one exists.
    pub e_warp: Option<f64>,
}

impl FrameMetrics {
    pub fn compute(output: &GrayImage, target: &GrayImage) -> Result<Self, MetricError> {
        Ok(Self {
            psnr: psnr(output, target, 1.0)?,
            ssim: ssim(output, target)?,
            mse: mse(output, target)?,
            e_warp: None,
        })
    }
}

/// Per-frame metrics and their arithmetic means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    /// Mean over frames that have a warping error.
    pub e_warp: Option<f64>,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Self {
        let n = frames.len().max(1) as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
        let warps: Vec<f64> = frames.iter().filter_map(|f| f.e_warp).collect();
        let e_warp = (!warps.is_empty()).then(|| warps.iter().sum::<f64>() / warps.len() as f64);
        Self {
            psnr: mean(|f| f.psnr),
            ssim: mean(|f| f.ssim),
            mse: mean(|f| f.mse),
            e_warp,
            frames,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
