//! L1, perceptual feature distance and their weighted sum.
//!
//! The perceptual term encodes both images with a fixed convolutional
//! encoder, unit-normalizes every layer's activations across channels at each
//! spatial site, scales the difference channelwise by `w_l`, and averages the
//! squared channel norm over the layer's `H_l x W_l` sites. Layer terms are
//! summed.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{Graph, GraphError, NodeId, Scalar, Tensor};

/// Seed of the default encoder weights.
pub const ENCODER_SEED: u64 = 0x000E_25E5;
pub const ENCODER_WIDTHS: [usize; 3] = [16, 32, 64];
pub const ENCODER_SLOPE: f64 = 0.25;
/// Smallest image side the encoder accepts.
pub const MIN_SIDE: usize = 16;
/// Added to the channel norm before dividing.
pub const NORM_EPS: f64 = 1e-20;
pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("image {0}x{1} is smaller than the encoder minimum of 16x16")]
    TooSmall(usize, usize),
    #[error("expected {expected} channel scales for layer {layer}, got {got}")]
    Scales { layer: usize, expected: usize, got: usize },
    #[error("lambda must be non-negative, got {0}")]
    Lambda(f64),
}

/// Fixed three-layer stride-2 encoder (16, 32, 64 filters, 3x3, PReLU).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder<T> {
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
    scales: Vec<Vec<T>>,
}

impl<T: Scalar> Default for FeatureEncoder<T> {
    fn default() -> Self {
        Self::with_seed(ENCODER_SEED)
    }
}

impl<T: Scalar> FeatureEncoder<T> {
    /// Fan-in uniform weights and small uniform biases; all `w_l` one.
    pub fn with_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &cout in &ENCODER_WIDTHS {
            let fan_in = (cin * 9) as f64;
            let bound = Float::sqrt(6.0 / ((1.0 + ENCODER_SLOPE * ENCODER_SLOPE) * fan_in));
            weights.push(Tensor::from_fn([cout, cin, 3, 3], |_| T::lit(rng.random_range(-bound..bound))));
            biases.push(Tensor::from_fn([1, cout, 1, 1], |_| T::lit(rng.random_range(-0.1..0.1))));
            cin = cout;
        }
        let scales = ENCODER_WIDTHS.iter().map(|&c| vec![T::one(); c]).collect();
        Self {
            weights,
            biases,
            scales,
        }
    }

    /// Replaces the channel scales `w_l`, one vector per layer.
    pub fn with_scales(mut self, scales: Vec<Vec<T>>) -> Result<Self, LossError> {
        for (layer, (s, &c)) in scales.iter().zip(&ENCODER_WIDTHS).enumerate() {
            if s.len() != c {
                return Err(LossError::Scales {
                    layer,
                    expected: c,
                    got: s.len(),
                });
            }
        }
        if scales.len() != ENCODER_WIDTHS.len() {
            return Err(LossError::Scales {
                layer: scales.len(),
                expected: ENCODER_WIDTHS.len(),
                got: scales.len(),
            });
        }
        self.scales = scales;
        Ok(self)
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor<T>] {
        &self.biases
    }

    pub fn scales(&self) -> &[Vec<T>] {
        &self.scales
    }

    /// FNV-1a over the bit patterns of every encoder value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let values = self
            .weights
            .iter()
            .chain(&self.biases)
            .flat_map(|t| t.data().iter())
            .chain(self.scales.iter().flatten());
        for v in values {
            for b in v.as_f64().to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Post-activation features of every layer.
    pub fn features(&self, g: &mut Graph<T>, image: NodeId) -> Result<Vec<NodeId>, LossError> {
        let [_, _, h, w] = g.shape(image);
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(LossError::TooSmall(w, h));
        }
        let slope = g.constant(Tensor::scalar(T::lit(ENCODER_SLOPE)));
        let mut x = image;
        let mut out = Vec::with_capacity(self.weights.len());
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            let (wn, bn) = (g.constant(wt.clone()), g.constant(b.clone()));
            let y = g.conv2d(x, wn, Some(bn), 2, 1)?;
            x = g.prelu(y, slope)?;
            out.push(x);
        }
        Ok(out)
    }
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, output: NodeId, target: NodeId) -> Result<NodeId, LossError> {
    let d = g.sub(output, target)?;
    let a = g.abs(d)?;
    Ok(g.mean(a)?)
}

/// Perceptual feature distance.
pub fn lpips_loss<T: Scalar>(
    g: &mut Graph<T>,
    output: NodeId,
    target: NodeId,
    encoder: &FeatureEncoder<T>,
) -> Result<NodeId, LossError> {
    if g.shape(output) != g.shape(target) {
        return Err(GraphError::ShapeMismatch {
            op: "lpips_loss",
            lhs: g.shape(output),
            rhs: g.shape(target),
        }
        .into());
    }
    let fo = encoder.features(g, output)?;
    let ft = encoder.features(g, target)?;
    let mut total: Option<NodeId> = None;
    for (l, (&a, &b)) in fo.iter().zip(&ft).enumerate() {
        let [n, _, h, w] = g.shape(a);
        let na = g.normalize_channels(a, T::lit(NORM_EPS))?;
        let nb = g.normalize_channels(b, T::lit(NORM_EPS))?;
        let d = g.sub(na, nb)?;
        let d = g.scale_channels(d, encoder.scales[l].clone())?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        let term = g.mul_scalar(s, T::lit(1.0 / (n * h * w) as f64))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("encoder has layers"))
}

/// Node ids of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimLossNodes {
    pub l1: NodeId,
    pub lpips: NodeId,
    pub total: NodeId,
}

/// Scalar loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub l1: f64,
    pub lpips: f64,
    pub total: f64,
    pub lambda: f64,
}

impl SimLossNodes {
    pub fn value<T: Scalar>(&self, g: &Graph<T>, lambda: f64) -> LossValue {
        LossValue {
            l1: g.value(self.l1).item().as_f64(),
            lpips: g.value(self.lpips).item().as_f64(),
            total: g.value(self.total).item().as_f64(),
            lambda,
        }
    }
}

/// `l1 + lambda * lpips`.
pub fn sim_loss<T: Scalar>(
    g: &mut Graph<T>,
    output: NodeId,
    target: NodeId,
    encoder: &FeatureEncoder<T>,
    lambda: f64,
) -> Result<SimLossNodes, LossError> {
    if !(lambda >= 0.0) {
        return Err(LossError::Lambda(lambda));
    }
    let l1 = l1_loss(g, output, target)?;
    let lpips = lpips_loss(g, output, target, encoder)?;
    let weighted = g.mul_scalar(lpips, T::lit(lambda))?;
    let total = g.add(l1, weighted)?;
    Ok(SimLossNodes { l1, lpips, total })
}
