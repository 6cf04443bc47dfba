//! Optimization primitives: step-decay schedule, Adam, global-norm clipping
//! and per-sample loss/gradient evaluation.

use alloc::vec::Vec;

use num_traits::Float;
use thiserror::Error;

use crate::autograd::{Graph, GraphError, Scalar, Tensor};
use crate::loss::{sim_loss, FeatureEncoder, LossError, LossValue};
use crate::network::{ModelWeights, NetworkError, SequenceInput};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("non-finite loss {loss} ({what})")]
    NonFinite { loss: f64, what: &'static str },
    #[error("empty batch")]
    EmptyBatch,
}

/// Epochs at which the rate drops tenfold: each decay sits halfway through
/// the span remaining after the previous one, until the span is below 2.
/// For 50 epochs: 25, 37, 43, 46, 48, 49.
pub fn decay_epochs(total: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let span = total - start;
        if span < 2 {
            return out;
        }
        start += span / 2;
        out.push(start);
    }
}

/// `lr0 * 10^-k` with `k` the number of decay epochs `<= epoch`.
pub fn lr_at(epoch: usize, total: usize, lr0: f64) -> f64 {
    let k = decay_epochs(total).iter().filter(|&&d| d <= epoch).count();
    lr0 / Float::powi(10.0, k as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments in the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let (one, eps) = (T::one(), T::lit(self.cfg.eps));
        let c1 = T::lit(1.0 - Float::powi(self.cfg.beta1, self.t as i32));
        let c2 = T::lit(1.0 - Float::powi(self.cfg.beta2, self.t as i32));
        let lr = T::lit(lr);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradients, accumulated in `f64`.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    Float::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>(),
    )
}

/// Rescales so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Network input paired with its HR target `[1, 1, sH, sW]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T> {
    pub input: SequenceInput<T>,
    pub target: Tensor<T>,
}

/// Loss terms and parameter gradients of one sample.
pub fn sample_gradients<T: Scalar>(
    weights: &ModelWeights<T>,
    encoder: &FeatureEncoder<T>,
    sample: &TrainSample<T>,
    lambda: f64,
) -> Result<(LossValue, Vec<Tensor<T>>), TrainError> {
    let mut g = Graph::new();
    let net = weights.bind(&mut g, true);
    let out = net.forward(&mut g, &sample.input)?;
    let target = g.constant(sample.target.clone());
    let nodes = sim_loss(&mut g, out.output, target, encoder, lambda)?;
    let value = nodes.value(&g, lambda);
    if !value.total.is_finite() {
        return Err(TrainError::NonFinite {
            loss: value.total,
            what: "sample loss",
        });
    }
    let mut grads = g.backward(nodes.total)?;
    let out = net
        .nodes()
        .iter()
        .zip(weights.tensors())
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, out))
}

/// Loss value of one sample without gradients.
pub fn sample_loss<T: Scalar>(
    weights: &ModelWeights<T>,
    encoder: &FeatureEncoder<T>,
    sample: &TrainSample<T>,
    lambda: f64,
) -> Result<LossValue, TrainError> {
    let mut g = Graph::new();
    let net = weights.bind(&mut g, false);
    let out = net.forward(&mut g, &sample.input)?;
    let target = g.constant(sample.target.clone());
    Ok(sim_loss(&mut g, out.output, target, encoder, lambda)?.value(&g, lambda))
}

/// Sums per-sample gradients in index order and divides by the batch size.
pub fn average_gradients<T: Scalar>(per_sample: Vec<Vec<Tensor<T>>>) -> Result<Vec<Tensor<T>>, TrainError> {
    let n = per_sample.len();
    let mut iter = per_sample.into_iter();
    let mut acc = iter.next().ok_or(TrainError::EmptyBatch)?;
    for grads in iter {
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.add_assign(g);
        }
    }
    let k = T::lit(1.0 / n as f64);
    for a in &mut acc {
        for v in a.data_mut() {
            *v *= k;
        }
    }
    Ok(acc)
}
