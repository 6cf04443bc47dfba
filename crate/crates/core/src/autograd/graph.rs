use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use super::conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, conv_transpose_out,
    ConvGeometry,
};
use super::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: invalid hyperparameters for input {input:?}")]
    Geometry { op: &'static str, input: Shape },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Shape),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("concat of zero tensors")]
    EmptyConcat,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulScalar(NodeId, T),
    Prelu {
        input: NodeId,
        slope: NodeId,
    },
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    Abs(NodeId),
    Square(NodeId),
    ScaleChannels(NodeId, Vec<T>),
    NormalizeChannels {
        input: NodeId,
        eps: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulScalar(..) => "mul_scalar",
            Op::Prelu { .. } => "prelu",
            Op::Concat(_) => "concat_channels",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::ScaleChannels(..) => "scale_channels",
            Op::NormalizeChannels { .. } => "normalize_channels",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Non-finite checks are on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor<T>) -> NodeId {
        self.push_raw(value, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        if self.check_finite && !value.all_finite() {
            return Err(GraphError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn check_bias(&self, op: &'static str, bias: Option<NodeId>, channels: usize) -> Result<(), GraphError> {
        if let Some(b) = bias {
            let s = self.shape(b);
            if s != [1, channels, 1, 1] {
                return Err(GraphError::ShapeMismatch {
                    op,
                    lhs: [1, channels, 1, 1],
                    rhs: s,
                });
            }
        }
        Ok(())
    }

    /// Cross-correlation; `weight: [out, in, kh, kw]`, `bias: [1, out, 1, 1]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si[1] != sw[1] {
            return Err(GraphError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        self.check_bias("conv2d", bias, sw[0])?;
        if ConvGeometry::new(si[1], (si[2], si[3]), (sw[2], sw[3]), stride, pad).is_none() {
            return Err(GraphError::Geometry {
                op: "conv2d",
                input: si,
            });
        }
        let value = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// Adjoint of [`Graph::conv2d`]; `weight: [in, out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si[1] != sw[0] {
            return Err(GraphError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: si,
                rhs: sw,
            });
        }
        self.check_bias("conv_transpose2d", bias, sw[1])?;
        if stride == 0
            || conv_transpose_out(si[2], sw[2], stride, pad).is_none()
            || conv_transpose_out(si[3], sw[3], stride, pad).is_none()
        {
            return Err(GraphError::Geometry {
                op: "conv_transpose2d",
                input: si,
            });
        }
        let value = conv_transpose2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &inputs,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul_scalar(&mut self, a: NodeId, k: T) -> Result<NodeId, GraphError> {
        let value = self.value(a).map(|v| v * k);
        self.push(value, Op::MulScalar(a, k), &[a])
    }

    /// `x` where positive, `slope * x` elsewhere; `slope` is a one-element node.
    pub fn prelu(&mut self, input: NodeId, slope: NodeId) -> Result<NodeId, GraphError> {
        let ss = self.shape(slope);
        if ss != [1, 1, 1, 1] {
            return Err(GraphError::ShapeMismatch {
                op: "prelu",
                lhs: [1, 1, 1, 1],
                rhs: ss,
            });
        }
        let a = self.value(slope).item();
        let value = self.value(input).map(|v| if v > T::zero() { v } else { a * v });
        self.push(value, Op::Prelu { input, slope }, &[input, slope])
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        let first = *parts.first().ok_or(GraphError::EmptyConcat)?;
        let [n, _, h, w] = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(first),
                    rhs: s,
                });
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).item_slice(b));
            }
        }
        let value = Tensor::from_vec([n, channels, h, w], data).expect("concat length");
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let value = self.value(a).map(|v| v.abs());
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let value = self.value(a).map(|v| v * v);
        self.push(value, Op::Square(a), &[a])
    }

    /// Multiplies channel `c` by the constant `scale[c]`.
    pub fn scale_channels(&mut self, a: NodeId, scale: Vec<T>) -> Result<NodeId, GraphError> {
        let s = self.shape(a);
        if scale.len() != s[1] {
            return Err(GraphError::ShapeMismatch {
                op: "scale_channels",
                lhs: s,
                rhs: [1, scale.len(), 1, 1],
            });
        }
        let mut value = self.value(a).clone();
        let plane = s[2] * s[3];
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let k = scale[i % s[1]];
            for v in chunk {
                *v *= k;
            }
        }
        self.push(value, Op::ScaleChannels(a, scale), &[a])
    }

    /// Divides each spatial site's channel vector by `(‖x‖₂ + eps)`.
    pub fn normalize_channels(&mut self, input: NodeId, eps: T) -> Result<NodeId, GraphError> {
        let x = self.value(input);
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let mut value = x.clone();
        for b in 0..n {
            for site in 0..plane {
                let norm = channel_norm(x, b, site, c, plane);
                let denom = norm + eps;
                let base = b * c * plane + site;
                for ch in 0..c {
                    value.data_mut()[base + ch * plane] = x.data()[base + ch * plane] / denom;
                }
            }
        }
        self.push(value, Op::NormalizeChannels { input, eps }, &[input])
    }

    /// Reverse sweep from a one-element `loss`. Gradients are kept for every
    /// node that requires them and is a leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, GraphError> {
        let ls = self.shape(loss);
        if ls != [1, 1, 1, 1] {
            return Err(GraphError::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let want = (self.wants(*input), self.wants(*weight), bias.is_some_and(|b| self.wants(b)));
                let (di, dw, db) = conv2d_backward(self.value(*input), self.value(*weight), g, *stride, *pad, want);
                if let Some(d) = di {
                    acc(grads, *input, d);
                }
                if let Some(d) = dw {
                    acc(grads, *weight, d);
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    acc(grads, *b, d);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let want = (self.wants(*input), self.wants(*weight), bias.is_some_and(|b| self.wants(b)));
                let (di, dw, db) =
                    conv_transpose2d_backward(self.value(*input), self.value(*weight), g, *stride, *pad, want);
                if let Some(d) = di {
                    acc(grads, *input, d);
                }
                if let Some(d) = dw {
                    acc(grads, *weight, d);
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    acc(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::MulScalar(a, k) => {
                if self.wants(*a) {
                    acc(grads, *a, g.map(|v| v * *k));
                }
            }
            Op::Prelu { input, slope } => {
                let x = self.value(*input);
                let a = self.value(*slope).item();
                if self.wants(*input) {
                    let mut d = g.clone();
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *dv *= a;
                        }
                    }
                    acc(grads, *input, d);
                }
                if self.wants(*slope) {
                    let mut s = T::zero();
                    for (&gv, &xv) in g.data().iter().zip(x.data()) {
                        if xv <= T::zero() {
                            s += gv * xv;
                        }
                    }
                    acc(grads, *slope, Tensor::scalar(s));
                }
            }
            Op::Concat(parts) => {
                let [n, _, h, w] = g.shape();
                let plane = h * w;
                let total = g.channels();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Tensor::zeros([n, c, h, w]);
                        for b in 0..n {
                            let src = &g.data()[(b * total + offset) * plane..(b * total + offset + c) * plane];
                            d.item_slice_mut(b).copy_from_slice(src);
                        }
                        acc(grads, p, d);
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    acc(grads, *a, Tensor::full(self.shape(*a), g.item()));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let s = self.shape(*a);
                    let k = g.item() / T::lit(super::tensor::numel(&s) as f64);
                    acc(grads, *a, Tensor::full(s, k));
                }
            }
            Op::Abs(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        // subgradient 0 at the kink
                        *dv = if xv > T::zero() {
                            *dv
                        } else if xv < T::zero() {
                            -*dv
                        } else {
                            T::zero()
                        };
                    }
                    acc(grads, *a, d);
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let two = T::one() + T::one();
                    let mut d = g.clone();
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        *dv *= two * xv;
                    }
                    acc(grads, *a, d);
                }
            }
            Op::ScaleChannels(a, scale) => {
                if self.wants(*a) {
                    let c = scale.len();
                    let plane = g.height() * g.width();
                    let mut d = g.clone();
                    for (i, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                        let k = scale[i % c];
                        for v in chunk {
                            *v *= k;
                        }
                    }
                    acc(grads, *a, d);
                }
            }
            Op::NormalizeChannels { input, eps } => {
                if self.wants(*input) {
                    let x = self.value(*input);
                    let [n, c, h, w] = x.shape();
                    let plane = h * w;
                    let mut d = Tensor::zeros(x.shape());
                    for b in 0..n {
                        for site in 0..plane {
                            let base = b * c * plane + site;
                            let norm = channel_norm(x, b, site, c, plane);
                            let denom = norm + *eps;
                            // y = x / (n + eps);  dy/dx = I/(n+eps) - x x^T / (n (n+eps)^2)
                            let mut xg = T::zero();
                            for ch in 0..c {
                                xg += x.data()[base + ch * plane] * g.data()[base + ch * plane];
                            }
                            let coupling = if norm > T::zero() {
                                xg / (norm * denom * denom)
                            } else {
                                T::zero()
                            };
                            for ch in 0..c {
                                let j = base + ch * plane;
                                d.data_mut()[j] = g.data()[j] / denom - x.data()[j] * coupling;
                            }
                        }
                    }
                    acc(grads, *input, d);
                }
            }
        }
    }
}

fn channel_norm<T: Scalar>(x: &Tensor<T>, b: usize, site: usize, c: usize, plane: usize) -> T {
    let base = b * c * plane + site;
    let mut s = T::zero();
    for ch in 0..c {
        let v = x.data()[base + ch * plane];
        s += v * v;
    }
    s.sqrt()
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the node did not receive any gradient.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, zeros of `shape` if disconnected from the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: Shape) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
