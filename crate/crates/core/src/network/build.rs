use crate::error::{Error, Result};
use crate::layers::{reorg_shape, Conv2d, LeakyRelu, MaxPool2d};
use crate::tensor::{Float, Shape, Tensor};

use super::{ConvBlock, Network, NetworkConfig, Node, Op, Source};

/// Channels added to the dense block's running concatenation by each unit.
pub const DENSE_INCREMENTS: [usize; 4] = [256, 512, 512, 512];

/// Pyramid levels `n_i`; windows are `ceil(size / n_i)`.
pub const SPP_LEVELS: [usize; 3] = [3, 2, 1];

/// `(3×3 width, 1×1 width)` for each dense unit at scale 1. The 3×3 conv is
/// twice as wide as the increment; the 1×1 conv reduces to the increment.
pub fn dense_unit_widths() -> [(usize, usize); 4] {
    DENSE_INCREMENTS.map(|k| (2 * k, k))
}

/// Stride-1 pooling windows for a feature map of side `fmap`, in pyramid order.
pub fn spp_windows(fmap: usize) -> [usize; 3] {
    SPP_LEVELS.map(|n| fmap.div_ceil(n))
}

pub(super) fn infer_shape<T: Float>(op: &Op<T>, inputs: &[Shape]) -> Result<Shape> {
    match op {
        Op::Conv(b) => b.conv.output_shape(inputs[0]),
        Op::MaxPool(p) => p.output_shape(inputs[0]),
        Op::Reorg(s) => reorg_shape(inputs[0], *s),
        Op::Route => {
            let first = inputs[0];
            let mut c = 0;
            for s in inputs {
                if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                    return Err(Error::ShapeMismatch { left: first, right: *s });
                }
                c += s.c;
            }
            Ok(first.with_channels(c))
        }
    }
}

struct Builder<T> {
    input: Shape,
    nodes: Vec<Node<T>>,
    act: LeakyRelu,
}

impl<T: Float> Builder<T> {
    fn shape_of(&self, s: Source) -> Shape {
        match s {
            Source::Image => self.input,
            Source::Node(i) => self.nodes[i].output_shape,
        }
    }

    fn push(&mut self, name: &str, op: Op<T>, inputs: Vec<Source>) -> Result<Source> {
        let shapes: Vec<Shape> = inputs.iter().map(|&s| self.shape_of(s)).collect();
        let output_shape = infer_shape(&op, &shapes)?;
        self.nodes.push(Node { name: name.to_string(), op, inputs, output_shape });
        Ok(Source::Node(self.nodes.len() - 1))
    }

    /// Same-padded conv with BN and leaky ReLU.
    fn conv(&mut self, name: &str, from: Source, filters: usize, kernel: usize) -> Result<Source> {
        let in_c = self.shape_of(from).c;
        let conv = Conv2d::same(in_c, filters, kernel)?;
        let block = ConvBlock::new(conv, true, Some(self.act));
        self.push(name, Op::Conv(Box::new(block)), vec![from])
    }

    fn maxpool(&mut self, name: &str, from: Source, pool: MaxPool2d) -> Result<Source> {
        self.push(name, Op::MaxPool(pool), vec![from])
    }
}

pub(super) fn build_nodes<T: Float>(cfg: &NetworkConfig) -> Result<Vec<Node<T>>> {
    let mut b = Builder {
        input: Shape::new(1, 3, cfg.input_size, cfg.input_size),
        nodes: Vec::new(),
        act: LeakyRelu::new(cfg.leaky_a)?,
    };
    let sc = |c: usize| cfg.scaled(c);
    let down = MaxPool2d::new(2, 2, 0)?;

    // five laminated conv-pool stages
    let x = b.conv("conv1", Source::Image, sc(32), 3)?;
    let x = b.maxpool("maxpool1", x, down)?;
    let x = b.conv("conv2", x, sc(64), 3)?;
    let x = b.maxpool("maxpool2", x, down)?;
    let x = b.conv("conv3", x, sc(128), 3)?;
    let x = b.conv("conv4", x, sc(64), 1)?;
    let x = b.conv("conv5", x, sc(128), 3)?;
    let x = b.maxpool("maxpool3", x, down)?;
    let x = b.conv("conv6", x, sc(256), 3)?;
    let x = b.conv("conv7", x, sc(128), 1)?;
    let x = b.conv("conv8", x, sc(256), 3)?;
    let x = b.maxpool("maxpool4", x, down)?;
    let x = b.conv("conv9", x, sc(512), 3)?;
    let x = b.conv("conv10", x, sc(256), 1)?;
    let x = b.conv("conv11", x, sc(512), 3)?;
    let x = b.conv("conv12", x, sc(256), 1)?;
    let conv13 = b.conv("conv13", x, sc(512), 3)?;
    let x0 = b.maxpool("maxpool5", conv13, down)?;

    // dense-connection block: each unit reads the concatenation of the block
    // input and every earlier unit output
    let mut members = vec![x0];
    let mut unit_in = x0;
    for (u, (wide, inc)) in dense_unit_widths().into_iter().enumerate() {
        let a = b.conv(&format!("conv{}", 14 + 2 * u), unit_in, sc(wide), 3)?;
        let out = b.conv(&format!("conv{}", 15 + 2 * u), a, sc(inc), 1)?;
        members.push(out);
        let name = if u == 3 { "dc_block".to_string() } else { format!("dc_concat{}", u + 1) };
        unit_in = b.push(&name, Op::Route, members.clone())?;
    }
    let x = b.conv("conv22", unit_in, sc(1024), 3)?;

    // pyramid pooling block
    let reduced = b.conv("conv23", x, sc(512), 1)?;
    let fmap = b.shape_of(reduced).h;
    let mut pooled = vec![reduced];
    for (i, w) in spp_windows(fmap).into_iter().enumerate() {
        pooled.push(b.maxpool(&format!("maxpool{}", 6 + i), reduced, MaxPool2d::same(w)?)?);
    }
    let spp = b.push("spp_block", Op::Route, pooled)?;
    let x = b.conv("conv26", spp, sc(512), 1)?;
    let head = b.conv("conv27", x, sc(1024), 3)?;

    // passthrough from the higher-resolution stage
    let pt = b.conv("passthrough", conv13, sc(64), 1)?;
    let reorg = b.push("reorg", Op::Reorg(2), vec![pt])?;
    let cat = b.push("concat", Op::Route, vec![reorg, head])?;
    let x = b.conv("conv30", cat, sc(1024), 3)?;

    // linear detection conv
    let in_c = b.shape_of(x).c;
    let det = Conv2d::same(in_c, cfg.output_channels(), 1)?;
    b.push("conv31", Op::Conv(Box::new(ConvBlock::new(det, false, None))), vec![x])?;

    Ok(b.nodes)
}

impl<T: Float> Network<T> {
    /// Runs shape inference on a fresh graph without allocating activations.
    pub fn shape_table(cfg: &NetworkConfig) -> Result<Vec<(String, Shape)>> {
        let net = Network::<T>::build(cfg)?;
        net.shape_check()?;
        Ok(net.layer_table())
    }

    /// Zero image of the right input shape.
    pub fn blank_input(&self, batch: usize) -> Tensor<T> {
        Tensor::filled(self.input_shape(batch), T::zero())
    }
}
