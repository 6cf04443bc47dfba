//! Event feature rectification (EFR), the recurrent back-projection cell and
//! the mixer.
//!
//! For a sequence of `S` stacks with central index `n`:
//!
//! ```text
//! RE_k   = EFR([SBN_k, SBN_n, F_k])        (central: [SBN_n, 0, 0])
//! State  = C(RE_0)
//! for k in 0..S:
//!     e      = C(RE_k) - A(State)
//!     State  = B(e) + C(RE_k)
//!     I_k    = D(State)
//! O      = Mixer([I_0, ..., I_{S-1}])
//! ```
//!
//! `C` lifts LR features to SR with stride-2 transposed convolutions; `A`
//! encodes the SR state down to LR and back up so the subtraction is
//! shape-valid; `B` and `D` run at SR and end in a plain convolution, so
//! zeroing either one zeroes its output. Residual blocks are
//! `x + conv(prelu(conv(x)))`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{Graph, GraphError, NodeId, Scalar, Shape, Tensor};
use crate::flow::{estimate_stack_flow, FlowConfig, FlowError};
use crate::image::GrayImage;
use crate::stacking::{NormalizeMode, StackSequence};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;
/// Scale applied to the initial weights of the last conv in a residual
/// branch, keeping deep residual stacks near identity at start.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;
/// Scale of the initial weights of the image-producing convs, so untrained
/// outputs start small.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;
/// Flow channels enter the rectification layer in tenths of a pixel, on the
/// order of the `[-1, 1]` stack values.
pub const FLOW_INPUT_SCALE: f64 = 0.1;
const DESCRIPTOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("expected {expected} stacks, got {got}")]
    SequenceLength { expected: usize, got: usize },
    #[error("input {got:?} does not fit the architecture: {reason}")]
    Input { got: Shape, reason: &'static str },
    #[error("complementary mode needs an LR frame")]
    MissingLrFrame,
    #[error("invalid architecture: {0}")]
    Arch(&'static str),
    #[error("weights do not match the architecture: {0}")]
    Weights(String),
}

/// Layer counts and widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    /// Channels per event stack.
    pub stack_channels: usize,
    /// Upscaling factor, 2 or 4.
    pub scale: usize,
    /// Width of the recurrent cell.
    pub filters: usize,
    /// Width of the rectified stack.
    pub efr_filters: usize,
    pub c_blocks: usize,
    pub a_blocks: usize,
    pub b_blocks: usize,
    pub d_blocks: usize,
    pub mixer_filters: usize,
    /// Stacks per sequence.
    pub sequence_length: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk(3, 2, 3)
    }
}

impl ArchConfig {
    /// 32 filters, 15 blocks in C and 5 in A, B and D.
    pub fn desk(stack_channels: usize, scale: usize, sequence_length: usize) -> Self {
        Self {
            stack_channels,
            scale,
            filters: 32,
            efr_filters: 32,
            c_blocks: 15,
            a_blocks: 5,
            b_blocks: 5,
            d_blocks: 5,
            mixer_filters: 32,
            sequence_length,
        }
    }

    /// Reduced widths and depths for quick single-core runs.
    pub fn toy(stack_channels: usize, scale: usize, sequence_length: usize) -> Self {
        Self {
            stack_channels,
            scale,
            filters: 16,
            efr_filters: 16,
            c_blocks: 3,
            a_blocks: 1,
            b_blocks: 1,
            d_blocks: 2,
            mixer_filters: 16,
            sequence_length,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.scale != 2 && self.scale != 4 {
            return Err(NetworkError::Arch("scale must be 2 or 4"));
        }
        if self.sequence_length == 0 || self.sequence_length % 2 == 0 {
            return Err(NetworkError::Arch("sequence length must be odd"));
        }
        if self.stack_channels == 0 || self.filters == 0 || self.efr_filters == 0 || self.mixer_filters == 0 {
            return Err(NetworkError::Arch("widths must be positive"));
        }
        Ok(())
    }

    /// Stride-2 stages between LR and SR.
    pub fn up_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn efr_in_channels(&self) -> usize {
        2 * self.stack_channels + 2
    }

    pub fn descriptor(&self) -> Vec<f32> {
        [
            DESCRIPTOR_VERSION as usize,
            self.stack_channels,
            self.scale,
            self.filters,
            self.efr_filters,
            self.c_blocks,
            self.a_blocks,
            self.b_blocks,
            self.d_blocks,
            self.mixer_filters,
            self.sequence_length,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    pub fn from_descriptor(d: &[f32]) -> Result<Self, NetworkError> {
        if d.len() != 11 || d[0] as u32 != DESCRIPTOR_VERSION {
            return Err(NetworkError::Arch("unrecognized architecture descriptor"));
        }
        if d.iter().any(|v| !(v.is_finite() && *v >= 0.0 && Float::fract(*v) == 0.0)) {
            return Err(NetworkError::Arch("descriptor entries must be non-negative integers"));
        }
        let u = |i: usize| d[i] as usize;
        let arch = Self {
            stack_channels: u(1),
            scale: u(2),
            filters: u(3),
            efr_filters: u(4),
            c_blocks: u(5),
            a_blocks: u(6),
            b_blocks: u(7),
            d_blocks: u(8),
            mixer_filters: u(9),
            sequence_length: u(10),
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform with the PReLU-adjusted fan-in bound, times a gain.
    Kaiming { fan_in: usize, gain: f64 },
    Zero,
    Slope,
}

struct Layout {
    entries: Vec<(String, Shape, Init)>,
}

impl Layout {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        self.entries.push((
            format!("{name}.w"),
            [cout, cin, k, k],
            Init::Kaiming {
                fan_in: cin * k * k,
                gain,
            },
        ));
        self.entries.push((format!("{name}.b"), [1, cout, 1, 1], Init::Zero));
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) {
        self.entries.push((
            format!("{name}.w"),
            [cin, cout, k, k],
            Init::Kaiming {
                fan_in: cin * k * k / (stride * stride),
                gain: 1.0,
            },
        ));
        self.entries.push((format!("{name}.b"), [1, cout, 1, 1], Init::Zero));
    }

    fn slope(&mut self, name: &str) {
        self.entries.push((format!("{name}.a"), [1, 1, 1, 1], Init::Slope));
    }

    fn block(&mut self, name: &str, f: usize) {
        self.conv(&format!("{name}.0"), f, f, 3, 1.0);
        self.slope(name);
        self.conv(&format!("{name}.1"), f, f, 3, RESIDUAL_INIT_SCALE);
    }

    fn build(arch: &ArchConfig) -> Self {
        let mut l = Layout { entries: Vec::new() };
        let (f, fe) = (arch.filters, arch.efr_filters);
        l.conv("efr.0", arch.efr_in_channels(), fe, 3, 1.0);
        l.slope("efr.0");
        l.conv("efr.1", fe, fe, 3, 1.0);
        l.slope("efr.1");

        l.conv("c.head", fe, f, 3, 1.0);
        l.slope("c.head");
        for i in 0..arch.c_blocks {
            l.block(&format!("c.blk{i}"), f);
        }
        for j in 0..arch.up_stages() {
            l.conv_t(&format!("c.up{j}"), f, f, 4, 2);
            l.slope(&format!("c.up{j}"));
        }

        for j in 0..arch.up_stages() {
            l.conv(&format!("a.down{j}"), f, f, 4, 1.0);
            l.slope(&format!("a.down{j}"));
        }
        for i in 0..arch.a_blocks {
            l.block(&format!("a.blk{i}"), f);
        }
        for j in 0..arch.up_stages() {
            l.conv_t(&format!("a.up{j}"), f, f, 4, 2);
            l.slope(&format!("a.up{j}"));
        }

        for i in 0..arch.b_blocks {
            l.block(&format!("b.blk{i}"), f);
        }
        l.conv("b.out", f, f, 3, 1.0);

        for i in 0..arch.d_blocks {
            l.block(&format!("d.blk{i}"), f);
        }
        l.conv("d.out", f, 1, 3, OUTPUT_INIT_SCALE);

        l.conv("mix.0", arch.sequence_length, arch.mixer_filters, 3, 1.0);
        l.slope("mix.0");
        l.conv("mix.1", arch.mixer_filters, 1, 3, OUTPUT_INIT_SCALE);
        l
    }
}

/// Named parameter tensors in a fixed order derived from the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    arch: ArchConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ModelWeights<T> {
    /// Seeded fan-in uniform init, zero biases, PReLU slopes at 0.25.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self, NetworkError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::build(&arch);
        let mut names = Vec::with_capacity(layout.entries.len());
        let mut tensors = Vec::with_capacity(layout.entries.len());
        for (name, shape, init) in layout.entries {
            let t = match init {
                Init::Zero => Tensor::zeros(shape),
                Init::Slope => Tensor::full(shape, T::lit(PRELU_INIT)),
                Init::Kaiming { fan_in, gain } => {
                    let bound = gain * Float::sqrt(6.0 / ((1.0 + PRELU_INIT * PRELU_INIT) * fan_in.max(1) as f64));
                    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
                }
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(arch, names, tensors))
    }

    /// Every tensor zero, slopes included.
    pub fn zeros(arch: ArchConfig) -> Result<Self, NetworkError> {
        arch.validate()?;
        let (names, tensors) = Layout::build(&arch)
            .entries
            .into_iter()
            .map(|(n, s, _)| (n, Tensor::zeros(s)))
            .unzip();
        Ok(Self::assemble(arch, names, tensors))
    }

    /// Validates names and shapes against the architecture's layout.
    pub fn from_named(arch: ArchConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, NetworkError> {
        arch.validate()?;
        let layout = Layout::build(&arch);
        if layout.entries.len() != named.len() {
            return Err(NetworkError::Weights(format!(
                "expected {} tensors, got {}",
                layout.entries.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape, _), (got_name, t)) in layout.entries.into_iter().zip(named) {
            if name != got_name || t.shape() != shape {
                return Err(NetworkError::Weights(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(arch, names, tensors))
    }

    fn assemble(arch: ArchConfig, names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            arch,
            names,
            tensors,
            index,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            arch: self.arch,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Names starting with `prefix`, e.g. `"c."` for RNet-C.
    pub fn group(&self, prefix: &str) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    /// Puts every tensor on `g`, as parameters when `trainable`, else as
    /// constants.
    pub fn bind<'w>(&'w self, g: &mut Graph<T>, trainable: bool) -> Network<'w, T> {
        let nodes = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.parameter(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Network { weights: self, nodes }
    }
}

impl<T: Scalar> ModelWeights<T> {
    /// Uses existing graph nodes, one per tensor in weight order, e.g. the
    /// parameters created by a gradient checker.
    pub fn with_nodes<'w>(&'w self, nodes: &[NodeId]) -> Result<Network<'w, T>, NetworkError> {
        if nodes.len() != self.tensors.len() {
            return Err(NetworkError::Weights(format!(
                "expected {} nodes, got {}",
                self.tensors.len(),
                nodes.len()
            )));
        }
        Ok(Network {
            weights: self,
            nodes: nodes.to_vec(),
        })
    }
}

/// Weights bound to a graph.
pub struct Network<'w, T> {
    weights: &'w ModelWeights<T>,
    nodes: Vec<NodeId>,
}

/// Node ids produced by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// Pre-clamp output `O`.
    pub output: NodeId,
    /// One intermediate image per step, temporal order.
    pub intermediates: Vec<NodeId>,
}

impl<'w, T: Scalar> Network<'w, T> {
    /// Parameter nodes in weight order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.weights.arch
    }

    fn p(&self, name: &str) -> NodeId {
        match self.weights.index.get(name) {
            Some(&i) => self.nodes[i],
            None => panic!("missing parameter {name}"),
        }
    }

    fn conv(&self, g: &mut Graph<T>, name: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId, NetworkError> {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        Ok(g.conv2d(x, w, Some(b), stride, pad)?)
    }

    fn conv_act(&self, g: &mut Graph<T>, name: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId, NetworkError> {
        let y = self.conv(g, name, x, stride, pad)?;
        Ok(g.prelu(y, self.p(&format!("{name}.a")))?)
    }

    fn up(&self, g: &mut Graph<T>, name: &str, x: NodeId) -> Result<NodeId, NetworkError> {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        let y = g.conv_transpose2d(x, w, Some(b), 2, 1)?;
        Ok(g.prelu(y, self.p(&format!("{name}.a")))?)
    }

    fn block(&self, g: &mut Graph<T>, name: &str, x: NodeId) -> Result<NodeId, NetworkError> {
        let h = self.conv(g, &format!("{name}.0"), x, 1, 1)?;
        let h = g.prelu(h, self.p(&format!("{name}.a")))?;
        let h = self.conv(g, &format!("{name}.1"), h, 1, 1)?;
        Ok(g.add(x, h)?)
    }

    fn blocks(&self, g: &mut Graph<T>, prefix: &str, count: usize, mut x: NodeId) -> Result<NodeId, NetworkError> {
        for i in 0..count {
            x = self.block(g, &format!("{prefix}.blk{i}"), x)?;
        }
        Ok(x)
    }

    /// Rectified stack from a `[1, 2c+2, h, w]` input.
    pub fn efr(&self, g: &mut Graph<T>, input: NodeId) -> Result<NodeId, NetworkError> {
        let x = self.conv_act(g, "efr.0", input, 1, 1)?;
        self.conv_act(g, "efr.1", x, 1, 1)
    }

    /// LR features to SR state space.
    pub fn rnet_c(&self, g: &mut Graph<T>, re: NodeId) -> Result<NodeId, NetworkError> {
        let mut x = self.conv_act(g, "c.head", re, 1, 1)?;
        x = self.blocks(g, "c", self.arch().c_blocks, x)?;
        for j in 0..self.arch().up_stages() {
            x = self.up(g, &format!("c.up{j}"), x)?;
        }
        Ok(x)
    }

    /// SR state down to LR and back to SR.
    pub fn rnet_a(&self, g: &mut Graph<T>, state: NodeId) -> Result<NodeId, NetworkError> {
        let mut x = state;
        for j in 0..self.arch().up_stages() {
            x = self.conv_act(g, &format!("a.down{j}"), x, 2, 1)?;
        }
        x = self.blocks(g, "a", self.arch().a_blocks, x)?;
        for j in 0..self.arch().up_stages() {
            x = self.up(g, &format!("a.up{j}"), x)?;
        }
        Ok(x)
    }

    pub fn rnet_b(&self, g: &mut Graph<T>, e: NodeId) -> Result<NodeId, NetworkError> {
        let x = self.blocks(g, "b", self.arch().b_blocks, e)?;
        self.conv(g, "b.out", x, 1, 1)
    }

    pub fn rnet_d(&self, g: &mut Graph<T>, state: NodeId) -> Result<NodeId, NetworkError> {
        let x = self.blocks(g, "d", self.arch().d_blocks, state)?;
        self.conv(g, "d.out", x, 1, 1)
    }

    /// `State = C(RE)`.
    pub fn init_state(&self, g: &mut Graph<T>, re: NodeId) -> Result<NodeId, NetworkError> {
        self.rnet_c(g, re)
    }

    /// One recurrent step; returns `(I, State')`.
    pub fn step(&self, g: &mut Graph<T>, re: NodeId, state: NodeId) -> Result<(NodeId, NodeId), NetworkError> {
        let c = self.rnet_c(g, re)?;
        self.step_with_projection(g, c, state)
    }

    fn step_with_projection(&self, g: &mut Graph<T>, c: NodeId, state: NodeId) -> Result<(NodeId, NodeId), NetworkError> {
        let a = self.rnet_a(g, state)?;
        let e = g.sub(c, a)?;
        let b = self.rnet_b(g, e)?;
        let next = g.add(b, c)?;
        let image = self.rnet_d(g, next)?;
        Ok((image, next))
    }

    pub fn mixer(&self, g: &mut Graph<T>, images: &[NodeId]) -> Result<NodeId, NetworkError> {
        if images.len() != self.arch().sequence_length {
            return Err(NetworkError::SequenceLength {
                expected: self.arch().sequence_length,
                got: images.len(),
            });
        }
        let x = g.concat_channels(images)?;
        let x = self.conv_act(g, "mix.0", x, 1, 1)?;
        self.conv(g, "mix.1", x, 1, 1)
    }

    /// Full forward pass over a prepared sequence.
    pub fn forward(&self, g: &mut Graph<T>, input: &SequenceInput<T>) -> Result<ForwardNodes, NetworkError> {
        input.check(self.arch())?;
        let central = input.central();
        let central_node = g.constant(input.stacks[central].clone());
        let shape = input.stacks[central].shape();
        let zeros = g.constant(Tensor::zeros([1, shape[1] + 2, shape[2], shape[3]]));
        let mut projections = Vec::with_capacity(input.len());
        for k in 0..input.len() {
            let x = if k == central {
                g.concat_channels(&[central_node, zeros])?
            } else {
                let s = g.constant(input.stacks[k].clone());
                let f = g.constant(input.flows[k].map(|v| v * T::lit(FLOW_INPUT_SCALE)));
                g.concat_channels(&[s, central_node, f])?
            };
            let re = self.efr(g, x)?;
            projections.push(self.rnet_c(g, re)?);
        }
        let mut state = projections[0];
        let mut intermediates = Vec::with_capacity(input.len());
        for &c in &projections {
            let (image, next) = self.step_with_projection(g, c, state)?;
            intermediates.push(image);
            state = next;
        }
        let output = self.mixer(g, &intermediates)?;
        Ok(ForwardNodes { output, intermediates })
    }
}

/// Network-ready stacks and flows for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput<T> {
    /// `[1, c, h, w]` normalized stacks in temporal order.
    pub stacks: Vec<Tensor<T>>,
    /// `[1, 2, h, w]` flow from each stack to the central one; zero for the
    /// central stack itself.
    pub flows: Vec<Tensor<T>>,
}

impl<T: Scalar> SequenceInput<T> {
    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }

    pub fn central(&self) -> usize {
        self.stacks.len() / 2
    }

    /// LR `(height, width)`.
    pub fn lr_dims(&self) -> (usize, usize) {
        let s = self.stacks[0].shape();
        (s[2], s[3])
    }

    fn check(&self, arch: &ArchConfig) -> Result<(), NetworkError> {
        if self.stacks.len() != arch.sequence_length || self.flows.len() != self.stacks.len() {
            return Err(NetworkError::SequenceLength {
                expected: arch.sequence_length,
                got: self.stacks.len(),
            });
        }
        let s0 = self.stacks[0].shape();
        if s0[0] != 1 || s0[1] != arch.stack_channels {
            return Err(NetworkError::Input {
                got: s0,
                reason: "stack channels",
            });
        }
        if s0[2] % arch.scale != 0 || s0[3] % arch.scale != 0 || s0[2] < 2 || s0[3] < 2 {
            return Err(NetworkError::Input {
                got: s0,
                reason: "LR size must be a multiple of the scale",
            });
        }
        for (s, f) in self.stacks.iter().zip(&self.flows) {
            if s.shape() != s0 {
                return Err(NetworkError::Input {
                    got: s.shape(),
                    reason: "stack shapes differ",
                });
            }
            if f.shape() != [1, 2, s0[2], s0[3]] {
                return Err(NetworkError::Input {
                    got: f.shape(),
                    reason: "flow shape",
                });
            }
        }
        Ok(())
    }

    /// Replaces the central stack with an LR intensity frame in `[0, 1]`
    /// mapped into the stack value range and repeated over the channels.
    pub fn with_central_frame(&self, frame: &GrayImage, mode: NormalizeMode) -> Result<Self, NetworkError> {
        let shape = self.stacks[self.central()].shape();
        if (frame.height(), frame.width()) != (shape[2], shape[3]) {
            return Err(NetworkError::Input {
                got: [1, 1, frame.height(), frame.width()],
                reason: "LR frame size",
            });
        }
        let map = |v: f64| match mode {
            NormalizeMode::Signed => 2.0 * v - 1.0,
            NormalizeMode::Raw8 => v,
        };
        let mut out = self.clone();
        out.stacks[self.central()] = Tensor::from_fn(shape, |[_, _, y, x]| T::lit(map(frame.get(x, y))));
        Ok(out)
    }

    /// Same stacks with every flow zeroed.
    pub fn without_flow(&self) -> Self {
        let mut out = self.clone();
        for f in &mut out.flows {
            *f = Tensor::zeros(f.shape());
        }
        out
    }
}

/// Normalizes stacks and, when `flow` is set, estimates flow from every
/// non-central stack to the central one; otherwise flows are zero.
pub fn prepare_sequence<T: Scalar>(
    seq: &StackSequence,
    mode: NormalizeMode,
    flow: Option<&FlowConfig>,
) -> Result<SequenceInput<T>, NetworkError> {
    let central = seq.central_index();
    let stacks = seq.stacks.iter().map(|s| s.to_network_input(mode)).collect();
    let flows = seq
        .stacks
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let (w, h) = (s.width(), s.height());
            match flow {
                Some(cfg) if k != central => Ok(estimate_stack_flow(s, seq.central(), cfg)?.to_tensor()),
                _ => Ok(Tensor::zeros([1, 2, h, w])),
            }
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    Ok(SequenceInput { stacks, flows })
}

/// Inference variants.
#[derive(Debug, Clone, PartialEq)]
pub enum InferenceMode {
    Main,
    /// Reruns with the first output, box-downsampled to LR, as the central stack.
    DuoPass,
    /// Uses the given LR intensity frame as the central stack.
    Complementary(GrayImage),
}

/// Output of [`infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Final output clamped to `[0, 1]`.
    pub output: GrayImage,
    /// First-pass output in duo-pass mode.
    pub first_pass: Option<GrayImage>,
}

fn run<T: Scalar>(weights: &ModelWeights<T>, input: &SequenceInput<T>) -> Result<GrayImage, NetworkError> {
    let mut g = Graph::new();
    let net = weights.bind(&mut g, false);
    let out = net.forward(&mut g, input)?;
    Ok(GrayImage::from_tensor(g.value(out.output), 0))
}

/// Forward without gradients; outputs are clamped at emission.
pub fn infer<T: Scalar>(
    weights: &ModelWeights<T>,
    input: &SequenceInput<T>,
    mode: &InferenceMode,
    normalize: NormalizeMode,
) -> Result<Inference, NetworkError> {
    match mode {
        InferenceMode::Main => Ok(Inference {
            output: run(weights, input)?.clamp01(),
            first_pass: None,
        }),
        InferenceMode::DuoPass => {
            let first = run(weights, input)?.clamp01();
            let lr = first
                .box_downsample(weights.arch().scale)
                .map_err(|_| NetworkError::Arch("output not divisible by scale"))?;
            let second = input.with_central_frame(&lr, normalize)?;
            Ok(Inference {
                output: run(weights, &second)?.clamp01(),
                first_pass: Some(first),
            })
        }
        InferenceMode::Complementary(frame) => {
            let second = input.with_central_frame(frame, normalize)?;
            Ok(Inference {
                output: run(weights, &second)?.clamp01(),
                first_pass: None,
            })
        }
    }
}
