//! Dense optical flow, backward warping and forward-backward occlusion masks.
//!
//! Flow from `a` to `b` is the field `f` with `a(p) ≈ b(p + f(p))`, so
//! backward-warping `b` by `f` reconstructs `a`. Estimation is coarse-to-fine
//! Lucas-Kanade with a small Tikhonov term, which drives the update to zero
//! wherever the image carries no gradient. The motion model is either dense
//! (one displacement per window) or a single affine field over the image.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use thiserror::Error;

use crate::autograd::{Scalar, Tensor};
use crate::image::GrayImage;
use crate::stacking::EventStack;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("inputs of {0:?} are smaller than 8x8")]
    TooSmall((usize, usize)),
}

/// Per-pixel `(dx, dy)` displacement, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        let mut f = Self::zeros(width, height);
        for p in f.data.chunks_exact_mut(2) {
            p[0] = dx;
            p[1] = dy;
        }
        f
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut data = Vec::with_capacity(2 * width * height);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(x, y);
                data.push(dx);
                data.push(dy);
            }
        }
        Self { width, height, data }
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

    /// Interleaved `dx, dy` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: (f64, f64)) {
        let i = 2 * (y * self.width + x);
        self.data[i] = d.0;
        self.data[i + 1] = d.1;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .chunks_exact(2)
            .map(|p| Float::sqrt(p[0] * p[0] + p[1] * p[1]))
            .fold(0.0, f64::max)
    }

    /// Bilinear sample with edge clamping.
    fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let x = x.clamp(0.0, self.width as f64 - 1.0);
        let y = y.clamp(0.0, self.height as f64 - 1.0);
        let (x0, y0) = (Float::floor(x) as usize, Float::floor(y) as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(self.get(x0, y0), self.get(x1, y0), fx);
        let bottom = lerp(self.get(x0, y1), self.get(x1, y1), fx);
        lerp(top, bottom, fy)
    }

    /// `[1, 2, h, w]` tensor with `dx` in channel 0 and `dy` in channel 1.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 2, self.height, self.width], |[_, c, y, x]| {
            T::lit(self.data[2 * (y * self.width + x) + c])
        })
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }
}

/// Motion model solved at each pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowModel {
    /// One displacement per pixel from windowed structure tensors.
    #[default]
    Dense,
    /// Six affine parameters fitted to every pixel at once. Exact for
    /// in-plane motion of a fronto-parallel plane, and far less noisy than
    /// the dense model on sparse event stacks.
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub model: FlowModel,
    /// Maximum pyramid levels; no level is coarser than 16 pixels.
    pub levels: usize,
    /// Half-size of the square aggregation window.
    pub window_radius: usize,
    /// Warp-and-solve iterations per level.
    pub iterations: usize,
    /// Tikhonov weight added to the structure tensor diagonal.
    pub regularization: f64,
    /// Gaussian pre-smoothing of both inputs.
    pub presmooth: f64,
    /// Windows whose structure tensor has a smaller eigenvalue keep their
    /// current flow.
    pub min_eigenvalue: f64,
    /// Largest update per iteration, in pixels of the current level.
    pub max_step: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            model: FlowModel::Dense,
            levels: 4,
            window_radius: 3,
            iterations: 4,
            regularization: 1e-4,
            presmooth: 1.0,
            min_eigenvalue: 1e-4,
            max_step: 1.0,
        }
    }
}

impl FlowConfig {
    /// Settings for channel-averaged event stacks: the affine model at full
    /// resolution with light smoothing. Stacks are sparse and only roughly
    /// brightness-constant, and downsampled stacks mislead the fit.
    pub fn stacks() -> Self {
        Self {
            model: FlowModel::Affine,
            levels: 1,
            presmooth: 0.7,
            iterations: 20,
            ..Self::default()
        }
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), FlowError> {
    if a != b {
        return Err(FlowError::DimensionMismatch { a, b });
    }
    Ok(())
}

fn sample_clamped(img: &GrayImage, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, img.width() as f64 - 1.0);
    let yc = y.clamp(0.0, img.height() as f64 - 1.0);
    img.sample_bilinear(xc, yc).unwrap_or(0.0)
}

fn half(img: &GrayImage) -> GrayImage {
    let blurred = img.gaussian_blur(1.0);
    let (w, h) = (img.width().div_ceil(2), img.height().div_ceil(2));
    GrayImage::from_fn(w, h, |x, y| blurred.get((2 * x).min(img.width() - 1), (2 * y).min(img.height() - 1)))
}

fn box_sum(img: &GrayImage, r: usize) -> GrayImage {
    let r = r as isize;
    let horiz = GrayImage::from_fn(img.width(), img.height(), |x, y| {
        (-r..=r).map(|d| img.get_clamped(x as isize + d, y as isize)).sum()
    });
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        (-r..=r).map(|d| horiz.get_clamped(x as isize, y as isize + d)).sum()
    })
}

/// Central differences with one-sided edges.
fn gradients(img: &GrayImage) -> (GrayImage, GrayImage) {
    let gx = GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        (img.get_clamped(x + 1, y) - img.get_clamped(x - 1, y)) * 0.5
    });
    let gy = GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        (img.get_clamped(x, y + 1) - img.get_clamped(x, y - 1)) * 0.5
    });
    (gx, gy)
}

fn refine(a: &GrayImage, b: &GrayImage, flow: &mut FlowField, cfg: &FlowConfig) {
    let (w, h) = a.dims();
    for _ in 0..cfg.iterations {
        let warped = GrayImage::from_fn(w, h, |x, y| {
            let (dx, dy) = flow.get(x, y);
            sample_clamped(b, x as f64 + dx, y as f64 + dy)
        });
        let mean = GrayImage::from_fn(w, h, |x, y| 0.5 * (a.get(x, y) + warped.get(x, y)));
        let (gx, gy) = gradients(&mean);
        let it = GrayImage::from_fn(w, h, |x, y| warped.get(x, y) - a.get(x, y));
        let prod = |p: &GrayImage, q: &GrayImage| {
            box_sum(&GrayImage::from_fn(w, h, |x, y| p.get(x, y) * q.get(x, y)), cfg.window_radius)
        };
        let (sxx, sxy, syy) = (prod(&gx, &gx), prod(&gx, &gy), prod(&gy, &gy));
        let (sxt, syt) = (prod(&gx, &it), prod(&gy, &it));
        for y in 0..h {
            for x in 0..w {
                let a11 = sxx.get(x, y) + cfg.regularization;
                let a12 = sxy.get(x, y);
                let a22 = syy.get(x, y) + cfg.regularization;
                let (b1, b2) = (-sxt.get(x, y), -syt.get(x, y));
                let det = a11 * a22 - a12 * a12;
                let half_trace = 0.5 * (a11 + a22);
                let min_eig = half_trace - Float::sqrt((half_trace * half_trace - det).max(0.0));
                if !(min_eig >= cfg.min_eigenvalue) || det.abs() < 1e-300 {
                    continue;
                }
                let mut du = (a22 * b1 - a12 * b2) / det;
                let mut dv = (a11 * b2 - a12 * b1) / det;
                let step = Float::sqrt(du * du + dv * dv);
                if step > cfg.max_step {
                    du *= cfg.max_step / step;
                    dv *= cfg.max_step / step;
                }
                let (fx, fy) = flow.get(x, y);
                flow.set(x, y, (fx + du, fy + dv));
            }
        }
    }
}

/// Affine parameters `[a11, a12, tx, a21, a22, ty]` acting on coordinates
/// centered on the image.
type Affine = [f64; 6];

fn affine_field(p: &Affine, w: usize, h: usize) -> FlowField {
    let (cx, cy) = ((w as f64 - 1.0) * 0.5, (h as f64 - 1.0) * 0.5);
    FlowField::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 - cx, y as f64 - cy);
        (p[0] * u + p[1] * v + p[2], p[3] * u + p[4] * v + p[5])
    })
}

/// Backward-warps `b` with clamping and marks the pixels whose target lies
/// inside the frame.
fn warp_clamped(b: &GrayImage, flow: &FlowField) -> (GrayImage, Mask) {
    let (w, h) = (b.width() as f64 - 1.0, b.height() as f64 - 1.0);
    let inside = |x: usize, y: usize| {
        let (dx, dy) = flow.get(x, y);
        let (tx, ty) = (x as f64 + dx, y as f64 + dy);
        (0.0..=w).contains(&tx) && (0.0..=h).contains(&ty)
    };
    let img = GrayImage::from_fn(b.width(), b.height(), |x, y| {
        let (dx, dy) = flow.get(x, y);
        sample_clamped(b, x as f64 + dx, y as f64 + dy)
    });
    (img, Mask::from_fn(b.width(), b.height(), inside))
}

/// Mean squared difference over the masked pixels.
fn masked_cost(a: &GrayImage, b: &GrayImage, mask: &Mask) -> f64 {
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|((p, q), _)| (p - q) * (p - q))
        .sum();
    sum / mask.count().max(1) as f64
}

/// Solves `m x = r` by Gaussian elimination with partial pivoting.
fn solve6(mut m: [[f64; 6]; 6], mut r: [f64; 6]) -> Option<[f64; 6]> {
    for i in 0..6 {
        let pivot = (i..6).max_by(|&p, &q| m[p][i].abs().total_cmp(&m[q][i].abs()))?;
        if m[pivot][i].abs() < 1e-300 {
            return None;
        }
        m.swap(i, pivot);
        r.swap(i, pivot);
        for k in i + 1..6 {
            let f = m[k][i] / m[i][i];
            for c in i..6 {
                m[k][c] -= f * m[i][c];
            }
            r[k] -= f * r[i];
        }
    }
    let mut x = [0.0; 6];
    for i in (0..6).rev() {
        let tail: f64 = (i + 1..6).map(|c| m[i][c] * x[c]).sum();
        x[i] = (r[i] - tail) / m[i][i];
    }
    Some(x)
}

/// Gauss-Newton on the affine parameters over the pixels that stay inside
/// the frame. A step is kept only if it lowers the mean warped residual,
/// halving it up to five times; iteration stops at the first step that
/// cannot.
fn refine_affine(a: &GrayImage, b: &GrayImage, p: &mut Affine, cfg: &FlowConfig) {
    let (w, h) = a.dims();
    let (cx, cy) = ((w as f64 - 1.0) * 0.5, (h as f64 - 1.0) * 0.5);
    let (mut warped, mut valid) = warp_clamped(b, &affine_field(p, w, h));
    let mut cost = masked_cost(a, &warped, &valid);
    for _ in 0..cfg.iterations {
        let mean = GrayImage::from_fn(w, h, |x, y| 0.5 * (a.get(x, y) + warped.get(x, y)));
        let (gx, gy) = gradients(&mean);
        let mut jtj = [[0.0; 6]; 6];
        let mut jtr = [0.0; 6];
        for y in 0..h {
            for x in 0..w {
                if !valid.get(x, y) {
                    continue;
                }
                let (u, v) = (x as f64 - cx, y as f64 - cy);
                let (ix, iy) = (gx.get(x, y), gy.get(x, y));
                let j = [ix * u, ix * v, ix, iy * u, iy * v, iy];
                let it = warped.get(x, y) - a.get(x, y);
                for r in 0..6 {
                    for c in 0..6 {
                        jtj[r][c] += j[r] * j[c];
                    }
                    jtr[r] -= j[r] * it;
                }
            }
        }
        for (r, row) in jtj.iter_mut().enumerate() {
            row[r] += cfg.regularization;
        }
        let Some(mut step) = solve6(jtj, jtr) else {
            return;
        };
        let shift = Float::sqrt(step[2] * step[2] + step[5] * step[5]);
        if shift > cfg.max_step {
            step.iter_mut().for_each(|s| *s *= cfg.max_step / shift);
        }
        let mut accepted = false;
        for _ in 0..6 {
            let trial: Affine = core::array::from_fn(|i| p[i] + step[i]);
            let (trial_warped, trial_valid) = warp_clamped(b, &affine_field(&trial, w, h));
            let trial_cost = masked_cost(a, &trial_warped, &trial_valid);
            if trial_cost < cost {
                (*p, warped, valid, cost, accepted) = (trial, trial_warped, trial_valid, trial_cost, true);
                break;
            }
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
        if !accepted {
            return;
        }
    }
}

/// Flow mapping `a` to `b`.
pub fn estimate_flow(a: &GrayImage, b: &GrayImage, cfg: &FlowConfig) -> Result<FlowField, FlowError> {
    check_dims(a.dims(), b.dims())?;
    if a.width() < 8 || a.height() < 8 {
        return Err(FlowError::TooSmall(a.dims()));
    }
    let mut pa = vec![a.gaussian_blur(cfg.presmooth)];
    let mut pb = vec![b.gaussian_blur(cfg.presmooth)];
    while pa.len() < cfg.levels.max(1) {
        let last = &pa[pa.len() - 1];
        if last.width() < 32 || last.height() < 32 {
            break;
        }
        let (na, nb) = (half(last), half(&pb[pb.len() - 1]));
        pa.push(na);
        pb.push(nb);
    }
    let top = pa.len() - 1;
    if cfg.model == FlowModel::Affine {
        let mut p: Affine = [0.0; 6];
        for level in (0..=top).rev() {
            if level != top {
                // Centered coordinates double with resolution; only the
                // translation rescales.
                p[2] *= 2.0;
                p[5] *= 2.0;
            }
            refine_affine(&pa[level], &pb[level], &mut p, cfg);
        }
        return Ok(affine_field(&p, a.width(), a.height()));
    }
    let mut flow = FlowField::zeros(pa[top].width(), pa[top].height());
    for level in (0..=top).rev() {
        let (la, lb) = (&pa[level], &pb[level]);
        if flow.dims() != la.dims() {
            let coarse = flow;
            flow = FlowField::from_fn(la.width(), la.height(), |x, y| {
                let (dx, dy) = coarse.sample(x as f64 / 2.0, y as f64 / 2.0);
                (2.0 * dx, 2.0 * dy)
            });
        }
        refine(la, lb, &mut flow, cfg);
    }
    Ok(flow)
}

/// Flow between channel-averaged stacks.
pub fn estimate_stack_flow(a: &EventStack, b: &EventStack, cfg: &FlowConfig) -> Result<FlowField, FlowError> {
    estimate_flow(&a.mean_image(), &b.mean_image(), cfg)
}

/// Bilinear backward warp `out(p) = img(p + flow(p))`. Samples outside the
/// image are marked invalid and set to 0.
pub fn warp_image(img: &GrayImage, flow: &FlowField) -> Result<(GrayImage, Mask), FlowError> {
    check_dims(img.dims(), flow.dims())?;
    let (w, h) = img.dims();
    let mut valid = Vec::with_capacity(w * h);
    let out = GrayImage::from_fn(w, h, |x, y| {
        let (dx, dy) = flow.get(x, y);
        let v = img.sample_bilinear(x as f64 + dx, y as f64 + dy);
        valid.push(v.is_some());
        v.unwrap_or(0.0)
    });
    Ok((out, Mask { width: w, height: h, data: valid }))
}

/// Forward-backward consistency: a pixel is kept when
/// `|f(p) + b(p + f(p))|^2 <= 0.01 (|f|^2 + |b|^2) + 0.5`, sampling the
/// backward flow with edge clamping.
pub fn occlusion_mask(forward: &FlowField, backward: &FlowField) -> Result<Mask, FlowError> {
    check_dims(forward.dims(), backward.dims())?;
    let (w, h) = forward.dims();
    Ok(Mask::from_fn(w, h, |x, y| {
        let (fx, fy) = forward.get(x, y);
        let (gx, gy) = backward.sample(x as f64 + fx, y as f64 + fy);
        let (sx, sy) = (fx + gx, fy + gy);
        sx * sx + sy * sy <= 0.01 * (fx * fx + fy * fy + gx * gx + gy * gy) + 0.5
    }))
}
