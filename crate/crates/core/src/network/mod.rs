//! The detector graph: five conv-pool stages, the dense-connection block, the
//! stride-1 pyramid pooling block, the reorg passthrough and the linear
//! detection convolution.
//!
//! The graph is a topologically ordered list of [`Node`]s. Each node reads
//! from the image or from earlier nodes; `Route` nodes concatenate their
//! inputs along channels. Backward walks the list in reverse and sums the
//! gradient arriving at a node from every consumer.

mod build;
mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::Anchor;
use crate::error::{Error, Result};
use crate::layers::{reorg_backward, reorg_forward, BatchNorm, BnCache, Conv2d, LeakyRelu, MaxPool2d, PoolCache};
use crate::tensor::{Float, Shape, Tensor};

pub use build::{dense_unit_widths, spp_windows, DENSE_INCREMENTS, SPP_LEVELS};
pub use weights::{WeightHeader, WEIGHT_FORMAT_VERSION, WEIGHT_MAGIC};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Square input side in pixels; a multiple of 32.
    pub input_size: usize,
    pub num_classes: usize,
    /// One entry per anchor, in grid units.
    pub anchors: Vec<Anchor>,
    /// Multiplier applied to every hidden channel count, as `(numerator, denominator)`.
    pub channel_scale: (u32, u32),
    pub leaky_a: f64,
}

impl NetworkConfig {
    pub fn new(input_size: usize, num_classes: usize, anchors: Vec<Anchor>) -> Self {
        NetworkConfig { input_size, num_classes, anchors, channel_scale: (1, 1), leaky_a: LeakyRelu::DEFAULT_A }
    }

    pub fn with_channel_scale(mut self, num: u32, den: u32) -> Self {
        self.channel_scale = (num, den);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.anchors.is_empty() {
            return Err(Error::Config("need at least one anchor".into()));
        }
        if self.anchors.iter().any(|a| !(a.w > 0.0 && a.h > 0.0)) {
            return Err(Error::Config("anchor dimensions must be positive".into()));
        }
        let (num, den) = self.channel_scale;
        if num == 0 || den == 0 || num > den {
            return Err(Error::Config(format!("channel scale must lie in (0, 1], got {num}/{den}")));
        }
        LeakyRelu::new(self.leaky_a)?;
        Ok(())
    }

    /// Cells per side of the output grid.
    pub fn grid_size(&self) -> usize {
        self.input_size / 32
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// `K·(5+C)`.
    pub fn output_channels(&self) -> usize {
        self.num_anchors() * (5 + self.num_classes)
    }

    /// Hidden channel count after scaling: rounded up to a multiple of 8, at least 8.
    /// Exact at scale 1.
    pub fn scaled(&self, channels: usize) -> usize {
        let (num, den) = (self.channel_scale.0 as usize, self.channel_scale.1 as usize);
        if num == den {
            return channels;
        }
        let c = (channels * num).div_ceil(den);
        c.div_ceil(8).max(1) * 8
    }
}

/// Where a node reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Image,
    Node(usize),
}

/// Convolution followed by optional batch norm and leaky ReLU, plus gradient
/// accumulators for its parameters.
#[derive(Clone, Debug)]
pub struct ConvBlock<T = f32> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm<T>>,
    pub activation: Option<LeakyRelu>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
}

impl<T: Float> ConvBlock<T> {
    fn new(conv: Conv2d<T>, bn: bool, activation: Option<LeakyRelu>) -> Self {
        let out = conv.out_channels;
        ConvBlock {
            grad_weight: vec![T::zero(); conv.weight.len()],
            grad_bias: vec![T::zero(); out],
            grad_gamma: vec![T::zero(); if bn { out } else { 0 }],
            grad_beta: vec![T::zero(); if bn { out } else { 0 }],
            bn: bn.then(|| BatchNorm::new(out)),
            activation,
            conv,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Op<T = f32> {
    Conv(Box<ConvBlock<T>>),
    MaxPool(MaxPool2d),
    /// Channel concatenation of the inputs, in order.
    Route,
    Reorg(usize),
}

#[derive(Clone, Debug)]
pub struct Node<T = f32> {
    pub name: String,
    pub op: Op<T>,
    pub inputs: Vec<Source>,
    /// Output shape for a single image.
    pub output_shape: Shape,
}

#[derive(Clone, Debug)]
enum NodeCache<T> {
    Conv(Option<BnCache<T>>),
    Pool(PoolCache),
    None,
}

#[derive(Clone, Debug)]
struct ForwardState<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    caches: Vec<NodeCache<T>>,
    grads: Vec<Option<Tensor<T>>>,
    input_grad: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

/// Mutable view of one parameter vector and its gradient.
pub struct ParamMut<'a, T> {
    pub kind: ParamKind,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    nodes: Vec<Node<T>>,
    state: Option<ForwardState<T>>,
}

impl<T: Float> Network<T> {
    /// Builds the graph with zeroed weights, unit BN scales and identity
    /// running statistics. Call [`Network::init_weights`] before training.
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let nodes = build::build_nodes(config)?;
        Ok(Network { config: config.clone(), nodes, state: None })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, 3, self.config.input_size, self.config.input_size)
    }

    pub fn output_shape(&self, batch: usize) -> Shape {
        Shape { n: batch, ..self.nodes.last().expect("non-empty graph").output_shape }
    }

    /// `(name, single-image output shape)` for every node, in order.
    pub fn layer_table(&self) -> Vec<(String, Shape)> {
        self.nodes.iter().map(|n| (n.name.clone(), n.output_shape)).collect()
    }

    pub fn conv_blocks(&self) -> impl Iterator<Item = &ConvBlock<T>> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Conv(c) => Some(c.as_ref()),
            _ => None,
        })
    }

    fn conv_blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock<T>> {
        self.nodes.iter_mut().filter_map(|n| match &mut n.op {
            Op::Conv(c) => Some(c.as_mut()),
            _ => None,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv_blocks()
            .map(|c| c.conv.weight.len() + c.conv.bias.len() + c.bn.as_ref().map_or(0, |b| 2 * b.channels()))
            .sum()
    }

    /// He-style fan-in uniform init: weights in `(-s, s)` with
    /// `s = sqrt(2 / (k·k·in_c))`; biases 0, BN scale 1, shift 0.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in self.conv_blocks_mut() {
            let c = &mut block.conv;
            let fan_in = (c.kernel * c.kernel * c.in_channels) as f64;
            let s = (2.0 / fan_in).sqrt();
            for w in c.weight.data_mut() {
                *w = T::from_f64(rng.gen_range(-s..s));
            }
            c.bias.iter_mut().for_each(|b| *b = T::zero());
            if let Some(bn) = &mut block.bn {
                *bn = BatchNorm::new(bn.channels());
            }
        }
        self.state = None;
    }

    /// Parameters in storage order: per conv, BN scale and shift, bias, weights.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for block in self.conv_blocks_mut() {
            let ConvBlock { conv, bn, grad_weight, grad_bias, grad_gamma, grad_beta, .. } = block;
            if let Some(bn) = bn {
                out.push(ParamMut { kind: ParamKind::BnScale, value: &mut bn.gamma, grad: grad_gamma });
                out.push(ParamMut { kind: ParamKind::BnShift, value: &mut bn.beta, grad: grad_beta });
            }
            out.push(ParamMut { kind: ParamKind::Bias, value: &mut conv.bias, grad: grad_bias });
            out.push(ParamMut { kind: ParamKind::Weight, value: conv.weight.data_mut(), grad: grad_weight });
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.input_shape(x.shape().n);
        if x.shape() != want {
            return Err(Error::ShapeMismatch { left: x.shape(), right: want });
        }
        Ok(())
    }

    fn gather<'a>(input: &'a Tensor<T>, outputs: &'a [Tensor<T>], sources: &[Source]) -> Vec<&'a Tensor<T>> {
        sources
            .iter()
            .map(|s| match *s {
                Source::Image => input,
                Source::Node(i) => &outputs[i],
            })
            .collect()
    }

    /// Read-only inference pass using BN running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins = Self::gather(x, &outputs, &node.inputs);
            let y = match &node.op {
                Op::Conv(block) => {
                    let mut y = block.conv.forward(ins[0])?;
                    if let Some(bn) = &block.bn {
                        y = bn.forward_infer(&y)?;
                    }
                    if let Some(act) = &block.activation {
                        y = act.forward(&y);
                    }
                    y
                }
                Op::MaxPool(pool) => pool.forward(ins[0])?.0,
                Op::Route => Tensor::concat_channels(&ins)?,
                Op::Reorg(s) => reorg_forward(ins[0], *s)?,
            };
            outputs.push(y);
        }
        Ok(outputs.pop().expect("non-empty graph"))
    }

    /// Full forward pass. In training mode BN uses batch statistics (and
    /// updates its running statistics) and every activation is cached for
    /// [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        if !training {
            self.state = None;
            return self.infer(x);
        }
        self.check_input(x)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &mut self.nodes {
            let ins = Self::gather(x, &outputs, &node.inputs);
            let (y, cache) = match &mut node.op {
                Op::Conv(block) => {
                    let mut y = block.conv.forward(ins[0])?;
                    let mut bn_cache = None;
                    if let Some(bn) = &mut block.bn {
                        let (z, c) = bn.forward_train(&y)?;
                        y = z;
                        bn_cache = Some(c);
                    }
                    if let Some(act) = &block.activation {
                        y = act.forward(&y);
                    }
                    (y, NodeCache::Conv(bn_cache))
                }
                Op::MaxPool(pool) => {
                    let (y, c) = pool.forward(ins[0])?;
                    (y, NodeCache::Pool(c))
                }
                Op::Route => (Tensor::concat_channels(&ins)?, NodeCache::None),
                Op::Reorg(s) => (reorg_forward(ins[0], *s)?, NodeCache::None),
            };
            outputs.push(y);
            caches.push(cache);
        }
        let out = outputs.last().expect("non-empty graph").clone();
        self.state = Some(ForwardState { input: x.clone(), outputs, caches, grads: Vec::new(), input_grad: None });
        Ok(out)
    }

    /// Hash of every piecewise-linear branch taken in the last training-mode
    /// pass: the sign of each activated conv output and each pool's argmax.
    /// Two passes with equal signatures sit on the same linear piece.
    pub fn branch_signature(&self) -> Option<u64> {
        use std::hash::{Hash, Hasher};
        let state = self.state.as_ref()?;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for ((node, out), cache) in self.nodes.iter().zip(&state.outputs).zip(&state.caches) {
            match (&node.op, cache) {
                (Op::Conv(block), _) if block.activation.is_some() => {
                    for v in out.data() {
                        (v.to_f64() > 0.0).hash(&mut h);
                    }
                }
                (_, NodeCache::Pool(c)) => c.argmax.hash(&mut h),
                _ => {}
            }
        }
        Some(h.finish())
    }

    /// Back-propagates `grad_out` (gradient of the loss with respect to the
    /// network output) and adds parameter gradients into the accumulators.
    /// Returns the gradient with respect to the input image.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let state = self.state.as_mut().ok_or(Error::MissingCache)?;
        let last = state.outputs.last().expect("non-empty graph").shape();
        if grad_out.shape() != last {
            return Err(Error::ShapeMismatch { left: grad_out.shape(), right: last });
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
        grads[n_nodes - 1] = Some(grad_out.clone());
        let mut input_grad = Tensor::filled(state.input.shape(), T::zero());

        fn accumulate<T: Float>(
            grads: &mut [Option<Tensor<T>>],
            input_grad: &mut Tensor<T>,
            src: Source,
            g: Tensor<T>,
        ) -> Result<()> {
            match src {
                Source::Image => input_grad.add_assign(&g),
                Source::Node(i) => match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => {
                        *slot = Some(g);
                        Ok(())
                    }
                },
            }
        }

        for idx in (0..n_nodes).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &mut self.nodes[idx];
            let input_of = |s: Source| match s {
                Source::Image => &state.input,
                Source::Node(i) => &state.outputs[i],
            };
            match &mut node.op {
                Op::Conv(block) => {
                    let mut g = g;
                    if let Some(act) = &block.activation {
                        // the output has the sign of the pre-activation
                        g = act.backward(&g, &state.outputs[idx])?;
                    }
                    if let Some(bn) = &block.bn {
                        let NodeCache::Conv(cache) = &state.caches[idx] else {
                            return Err(Error::MissingCache);
                        };
                        let bg = bn.backward(&g, cache.as_ref())?;
                        for (a, b) in block.grad_gamma.iter_mut().zip(&bg.gamma) {
                            *a += *b;
                        }
                        for (a, b) in block.grad_beta.iter_mut().zip(&bg.beta) {
                            *a += *b;
                        }
                        g = bg.input;
                    }
                    let src = node.inputs[0];
                    let cg = block.conv.backward(&g, input_of(src))?;
                    for (a, b) in block.grad_weight.iter_mut().zip(cg.weight.data()) {
                        *a += *b;
                    }
                    for (a, b) in block.grad_bias.iter_mut().zip(&cg.bias) {
                        *a += *b;
                    }
                    accumulate(&mut grads, &mut input_grad, src, cg.input)?;
                }
                Op::MaxPool(pool) => {
                    let NodeCache::Pool(cache) = &state.caches[idx] else {
                        return Err(Error::MissingCache);
                    };
                    let gi = pool.backward(&g, cache)?;
                    accumulate(&mut grads, &mut input_grad, node.inputs[0], gi)?;
                }
                Op::Route => {
                    let chans: Vec<usize> = node.inputs.iter().map(|&s| input_of(s).shape().c).collect();
                    let parts = g.split_channels(&chans)?;
                    for (&src, part) in node.inputs.iter().zip(parts) {
                        accumulate(&mut grads, &mut input_grad, src, part)?;
                    }
                }
                Op::Reorg(s) => {
                    let src = node.inputs[0];
                    let gi = reorg_backward(&g, input_of(src).shape(), *s)?;
                    accumulate(&mut grads, &mut input_grad, src, gi)?;
                }
            }
        }
        state.grads = grads;
        state.input_grad = Some(input_grad.clone());
        Ok(input_grad)
    }

    /// Gradient that reached node `idx`'s output in the last backward pass.
    pub fn node_gradient(&self, idx: usize) -> Option<&Tensor<T>> {
        self.state.as_ref()?.grads.get(idx)?.as_ref()
    }

    /// Output of node `idx` from the last training-mode forward pass.
    pub fn node_output(&self, idx: usize) -> Option<&Tensor<T>> {
        self.state.as_ref()?.outputs.get(idx)
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        self.state = None;
    }

    /// Converts every parameter and statistic to another element type.
    pub fn cast<U: Float>(&self) -> Network<U> {
        let conv_vec = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                name: n.name.clone(),
                inputs: n.inputs.clone(),
                output_shape: n.output_shape,
                op: match &n.op {
                    Op::Conv(b) => Op::Conv(Box::new(ConvBlock {
                        conv: Conv2d {
                            in_channels: b.conv.in_channels,
                            out_channels: b.conv.out_channels,
                            kernel: b.conv.kernel,
                            stride: b.conv.stride,
                            pad: b.conv.pad,
                            weight: b.conv.weight.cast(),
                            bias: conv_vec(&b.conv.bias),
                        },
                        bn: b.bn.as_ref().map(|bn| BatchNorm {
                            gamma: conv_vec(&bn.gamma),
                            beta: conv_vec(&bn.beta),
                            running_mean: conv_vec(&bn.running_mean),
                            running_var: conv_vec(&bn.running_var),
                            epsilon: bn.epsilon,
                            momentum: bn.momentum,
                        }),
                        activation: b.activation,
                        grad_weight: conv_vec(&b.grad_weight),
                        grad_bias: conv_vec(&b.grad_bias),
                        grad_gamma: conv_vec(&b.grad_gamma),
                        grad_beta: conv_vec(&b.grad_beta),
                    })),
                    Op::MaxPool(p) => Op::MaxPool(*p),
                    Op::Route => Op::Route,
                    Op::Reorg(s) => Op::Reorg(*s),
                },
            })
            .collect();
        Network { config: self.config.clone(), nodes, state: None }
    }

    pub(crate) fn shape_check(&self) -> Result<()> {
        let mut shapes: Vec<Shape> = Vec::new();
        let input = self.input_shape(1);
        for node in &self.nodes {
            let ins: Vec<Shape> = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Image => input,
                    Source::Node(i) => shapes[i],
                })
                .collect();
            let s = build::infer_shape(&node.op, &ins)?;
            if s != node.output_shape {
                return Err(Error::ShapeMismatch { left: s, right: node.output_shape });
            }
            shapes.push(s);
        }
        Ok(())
    }
}
