//! Convolution kernels (im2col + GEMM) shared by the graph operators.

use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, Tensor};

/// Geometry of a strided, zero-padded square-free 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `None` if the output would be empty.
    pub fn new(
        channels: usize,
        (in_h, in_w): (usize, usize),
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return None;
        }
        let ph = in_h + 2 * pad;
        let pw = in_w + 2 * pad;
        if ph < kernel_h || pw < kernel_w {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    /// Rows of the column matrix: `channels * kernel_h * kernel_w`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the column matrix: `out_h * out_w`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[c, h, w]` image into a `[c*kh*kw, oh*ow]` column matrix.
pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let positions = g.positions();
    debug_assert_eq!(cols.len(), g.patch_len() * positions);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + kx - pad < in_w
                        let lo = g.pad.saturating_sub(kx).min(g.out_w);
                        let hi = (g.in_w + g.pad).saturating_sub(kx).min(g.out_w).max(lo);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kx - g.pad;
                            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= g.in_w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let positions = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: Option<&Tensor<T>>) {
    let Some(bias) = bias else { return };
    let [n, c, h, w] = out.shape();
    let plane = h * w;
    let data = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let v = bias.data()[ch];
            let start = (b * c + ch) * plane;
            for x in &mut data[start..start + plane] {
                *x += v;
            }
        }
    }
}

fn bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = grad_out.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([1, c, 1, 1]);
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for &v in &grad_out.data()[start..start + plane] {
                acc += v;
            }
        }
        out.data_mut()[ch] = acc;
    }
    out
}

/// Cross-correlation. `input: [n, c, h, w]`, `weight: [o, c, kh, kw]`,
/// `bias: [1, o, 1, 1]`. Shapes are assumed validated by the caller.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let [o, _, kh, kw] = weight.shape();
    let g = ConvGeometry::new(c, (h, w), (kh, kw), stride, pad).expect("conv2d: empty output");
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = Tensor::zeros([n, o, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        im2col(input.item_slice(b), &g, &mut cols);
        T::gemm(
            o,
            k,
            p,
            T::one(),
            weight.data(),
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            T::zero(),
            out.item_slice_mut(b),
            (p as isize, 1),
        );
    }
    add_bias(&mut out, bias);
    out
}

/// Gradients of [`conv2d_forward`]: `(d input, d weight, d bias)`, each only
/// if requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, c, h, w] = input.shape();
    let [o, _, kh, kw] = weight.shape();
    let g = ConvGeometry::new(c, (h, w), (kh, kw), stride, pad).expect("conv2d: empty output");
    let (k, p) = (g.patch_len(), g.positions());
    let mut d_input = want.0.then(|| Tensor::zeros(input.shape()));
    let mut d_weight = want.1.then(|| Tensor::zeros(weight.shape()));
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        let go = grad_out.item_slice(b);
        if let Some(dw) = d_weight.as_mut() {
            im2col(input.item_slice(b), &g, &mut cols);
            // dW[o, k] += dOut[o, p] · cols[k, p]^T
            T::gemm(
                o,
                p,
                k,
                T::one(),
                go,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::one(),
                dw.data_mut(),
                (k as isize, 1),
            );
        }
        if let Some(di) = d_input.as_mut() {
            // dcols[k, p] = W[o, k]^T · dOut[o, p]
            T::gemm(
                k,
                o,
                p,
                T::one(),
                weight.data(),
                (1, k as isize),
                go,
                (p as isize, 1),
                T::zero(),
                &mut cols,
                (p as isize, 1),
            );
            col2im(&cols, &g, di.item_slice_mut(b));
        }
    }
    let d_bias = want.2.then(|| bias_grad(grad_out));
    (d_input, d_weight, d_bias)
}

/// Output size of a transposed convolution: `(in - 1) * stride - 2 * pad + k`.
pub(crate) fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((size.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad).filter(|&s| s > 0)
}

/// Transposed convolution, the adjoint of [`conv2d_forward`] with the same
/// hyperparameters. `input: [n, ci, h, w]`, `weight: [ci, co, kh, kw]`,
/// `bias: [1, co, 1, 1]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, ci, h, w] = input.shape();
    let [_, co, kh, kw] = weight.shape();
    let oh = conv_transpose_out(h, kh, stride, pad).expect("conv_transpose2d: empty output");
    let ow = conv_transpose_out(w, kw, stride, pad).expect("conv_transpose2d: empty output");
    // Geometry of the forward convolution that this operator is the adjoint of.
    let g = ConvGeometry::new(co, (oh, ow), (kh, kw), stride, pad).expect("conv_transpose2d geometry");
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        // cols[k, p] = W[ci, k]^T · x[ci, p]
        T::gemm(
            k,
            ci,
            p,
            T::one(),
            weight.data(),
            (1, k as isize),
            input.item_slice(b),
            (p as isize, 1),
            T::zero(),
            &mut cols,
            (p as isize, 1),
        );
        col2im(&cols, &g, out.item_slice_mut(b));
    }
    add_bias(&mut out, bias);
    out
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, ci, h, w] = input.shape();
    let [_, co, kh, kw] = weight.shape();
    let [_, _, oh, ow] = grad_out.shape();
    let g = ConvGeometry::new(co, (oh, ow), (kh, kw), stride, pad).expect("conv_transpose2d geometry");
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    let (k, p) = (g.patch_len(), g.positions());
    let mut d_input = want.0.then(|| Tensor::zeros(input.shape()));
    let mut d_weight = want.1.then(|| Tensor::zeros(weight.shape()));
    let mut cols: Vec<T> = vec![T::zero(); k * p];
    for b in 0..n {
        if d_input.is_none() && d_weight.is_none() {
            break;
        }
        im2col(grad_out.item_slice(b), &g, &mut cols);
        if let Some(di) = d_input.as_mut() {
            // dx[ci, p] = W[ci, k] · cols[k, p]
            T::gemm(
                ci,
                k,
                p,
                T::one(),
                weight.data(),
                (k as isize, 1),
                &cols,
                (p as isize, 1),
                T::zero(),
                di.item_slice_mut(b),
                (p as isize, 1),
            );
        }
        if let Some(dw) = d_weight.as_mut() {
            // dW[ci, k] += x[ci, p] · cols[k, p]^T
            T::gemm(
                ci,
                p,
                k,
                T::one(),
                input.item_slice(b),
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::one(),
                dw.data_mut(),
                (k as isize, 1),
            );
        }
    }
    let d_bias = want.2.then(|| bias_grad(grad_out));
    (d_input, d_weight, d_bias)
}
