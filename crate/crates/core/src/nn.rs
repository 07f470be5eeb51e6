//! Model graphs for the plain, residual and inception families.
//!
//! A [`ModelGraph`] is an ordered list of [`Node`]s over NCHW activations.
//! Parameters are visited in a fixed canonical order (weight then bias for
//! every conv and dense layer, depth first), which is also the slot order
//! used on the tape and by aggregation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, Padding, PoolSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    /// `[N, C, K, K]`
    pub weights: Tensor,
    /// `[N]`
    pub bias: Tensor,
    pub padding: Padding,
    pub stride: usize,
    pub prunable: bool,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, filters: usize, in_channels: usize, kernel: usize, prunable: bool) -> Self {
        ConvLayer {
            name: name.into(),
            weights: Tensor::zeros(&[filters, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[filters]),
            padding: Padding::Same,
            stride: 1,
            prunable,
        }
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            padding: self.padding,
            stride: self.stride,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn out_map(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let k = self.kernel();
        if c != self.in_channels() {
            return Err(Error::shape(
                "shape inference",
                format!("{} expects {} channels, got {c}", self.name, self.in_channels()),
            ));
        }
        let pad = self.padding.amount(k);
        match (
            crate::ops::window_out(h, k, pad, self.stride),
            crate::ops::window_out(w, k, pad, self.stride),
        ) {
            (Some(oh), Some(ow)) => Ok((self.filters(), oh, ow)),
            _ => Err(Error::shape(
                "shape inference",
                format!("{} kernel {k} exceeds {h}x{w}", self.name),
            )),
        }
    }

    fn flops(&self, oh: usize, ow: usize) -> u64 {
        let k = self.kernel() as u64;
        2 * k * k * self.in_channels() as u64 * (oh * ow) as u64 * self.filters() as u64
    }

    fn record(&self, tape: &mut Tape, slots: &mut usize, x: Var) -> Result<Var> {
        let w = tape.param(*slots, self.weights.clone());
        let b = tape.param(*slots + 1, self.bias.clone());
        *slots += 2;
        tape.conv2d(x, w, b, self.geometry())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    /// `[F, O]`
    pub weights: Tensor,
    /// `[O]`
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            name: name.into(),
            weights: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// `relu(conv2(relu(conv1(x))) + x)`. Only `conv1` may change width.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

/// An optional leading pool followed by a chain of conv+relu stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub pool: Option<PoolSpec>,
    pub convs: Vec<ConvLayer>,
}

impl Branch {
    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, ConvLayer::filters)
    }
}

/// Parallel branches concatenated along the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct InceptionBlock {
    pub name: String,
    pub branches: Vec<Branch>,
}

impl InceptionBlock {
    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(Branch::out_channels).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Conv(ConvLayer),
    Relu,
    Pool(PoolSpec),
    Flatten,
    Dense(DenseLayer),
    Residual(ResidualBlock),
    Inception(InceptionBlock),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Conv,
    Resnet,
    Inception,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv" | "plain" => Ok(Family::Conv),
            "resnet" | "residual" => Ok(Family::Resnet),
            "inception" => Ok(Family::Inception),
            other => Err(Error::Config(format!(
                "unknown architecture family `{other}` (expected conv, resnet or inception)"
            ))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Conv => "conv",
            Family::Resnet => "resnet",
            Family::Inception => "inception",
        })
    }
}

/// Activation shape between nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn elements(self) -> usize {
        match self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(f) => f,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub family: Family,
    pub nodes: Vec<Node>,
    /// `[C, H, W]` of one sample.
    pub input_shape: [usize; 3],
    pub classes: usize,
}

/// Per-kind FLOP totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub conv: u64,
    pub dense: u64,
    pub elementwise: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.conv + self.dense + self.elementwise
    }
}

fn map_dims(shape: ActShape, what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        ActShape::Map { c, h, w } => Ok((c, h, w)),
        ActShape::Flat(_) => Err(Error::shape(
            "shape inference",
            format!("{what} needs a feature map, got a flat vector"),
        )),
    }
}

fn pool_dims(spec: &PoolSpec, c: usize, h: usize, w: usize) -> Result<ActShape> {
    match (spec.out_extent(h), spec.out_extent(w)) {
        (Some(oh), Some(ow)) => Ok(ActShape::Map { c, h: oh, w: ow }),
        _ => Err(Error::shape(
            "shape inference",
            format!("pool {spec:?} exceeds {h}x{w}"),
        )),
    }
}

impl Branch {
    fn infer(&self, c: usize, h: usize, w: usize, flops: &mut FlopCount) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = (c, h, w);
        if let Some(p) = &self.pool {
            let ActShape::Map { h: ph, w: pw, .. } = pool_dims(p, c, h, w)? else {
                unreachable!()
            };
            h = ph;
            w = pw;
            flops.elementwise += (c * h * w) as u64;
        }
        if self.convs.is_empty() {
            return Err(Error::shape("shape inference", "inception branch without convs"));
        }
        for conv in &self.convs {
            (c, h, w) = conv.out_map(c, h, w)?;
            flops.conv += conv.flops(h, w);
            flops.elementwise += (c * h * w) as u64;
        }
        Ok((c, h, w))
    }
}

impl Node {
    fn infer(&self, input: ActShape, flops: &mut FlopCount) -> Result<ActShape> {
        match self {
            Node::Conv(conv) => {
                let (c, h, w) = map_dims(input, &conv.name)?;
                let (c, h, w) = conv.out_map(c, h, w)?;
                flops.conv += conv.flops(h, w);
                Ok(ActShape::Map { c, h, w })
            }
            Node::Relu => {
                flops.elementwise += input.elements() as u64;
                Ok(input)
            }
            Node::Pool(spec) => {
                let (c, h, w) = map_dims(input, "pool")?;
                let out = pool_dims(spec, c, h, w)?;
                flops.elementwise += out.elements() as u64;
                Ok(out)
            }
            Node::Flatten => Ok(ActShape::Flat(input.elements())),
            Node::Dense(d) => {
                let ActShape::Flat(f) = input else {
                    return Err(Error::shape(
                        "shape inference",
                        format!("{} needs a flattened input", d.name),
                    ));
                };
                if f != d.inputs() {
                    return Err(Error::shape(
                        "shape inference",
                        format!("{} expects {} features, got {f}", d.name, d.inputs()),
                    ));
                }
                flops.dense += 2 * (d.inputs() * d.outputs()) as u64;
                Ok(ActShape::Flat(d.outputs()))
            }
            Node::Residual(block) => {
                let (c, h, w) = map_dims(input, &block.conv1.name)?;
                let (c1, h1, w1) = block.conv1.out_map(c, h, w)?;
                flops.conv += block.conv1.flops(h1, w1);
                flops.elementwise += (c1 * h1 * w1) as u64;
                let (c2, h2, w2) = block.conv2.out_map(c1, h1, w1)?;
                flops.conv += block.conv2.flops(h2, w2);
                if (c2, h2, w2) != (c, h, w) {
                    return Err(Error::shape(
                        "shape inference",
                        format!(
                            "{} output {c2}x{h2}x{w2} does not match skip path {c}x{h}x{w}",
                            block.conv2.name
                        ),
                    ));
                }
                // residual add + relu
                flops.elementwise += 2 * (c * h * w) as u64;
                Ok(input)
            }
            Node::Inception(block) => {
                let (c, h, w) = map_dims(input, &block.name)?;
                let mut total = 0;
                let mut spatial = None;
                for branch in &block.branches {
                    let (bc, bh, bw) = branch.infer(c, h, w, flops)?;
                    if *spatial.get_or_insert((bh, bw)) != (bh, bw) {
                        return Err(Error::shape(
                            "shape inference",
                            format!("{} branches disagree on spatial extents", block.name),
                        ));
                    }
                    total += bc;
                }
                let (oh, ow) = spatial
                    .ok_or_else(|| Error::shape("shape inference", format!("{} has no branches", block.name)))?;
                Ok(ActShape::Map { c: total, h: oh, w: ow })
            }
        }
    }

    fn record(&self, tape: &mut Tape, slots: &mut usize, x: Var) -> Result<Var> {
        match self {
            Node::Conv(conv) => conv.record(tape, slots, x),
            Node::Relu => Ok(tape.relu(x)),
            Node::Pool(spec) => tape.maxpool(x, *spec),
            Node::Flatten => tape.flatten(x),
            Node::Dense(d) => {
                let w = tape.param(*slots, d.weights.clone());
                let b = tape.param(*slots + 1, d.bias.clone());
                *slots += 2;
                tape.dense(x, w, b)
            }
            Node::Residual(block) => {
                let h = block.conv1.record(tape, slots, x)?;
                let h = tape.relu(h);
                let h = block.conv2.record(tape, slots, h)?;
                let s = tape.add(h, x)?;
                Ok(tape.relu(s))
            }
            Node::Inception(block) => {
                let mut outs = Vec::with_capacity(block.branches.len());
                for branch in &block.branches {
                    let mut h = x;
                    if let Some(p) = &branch.pool {
                        h = tape.maxpool(h, *p)?;
                    }
                    for conv in &branch.convs {
                        h = conv.record(tape, slots, h)?;
                        h = tape.relu(h);
                    }
                    outs.push(h);
                }
                tape.concat_channels(&outs)
            }
        }
    }
}

/// Conv layers of a node, in canonical order.
fn node_convs(node: &Node) -> Vec<&ConvLayer> {
    match node {
        Node::Conv(c) => vec![c],
        Node::Residual(b) => vec![&b.conv1, &b.conv2],
        Node::Inception(b) => b.branches.iter().flat_map(|br| br.convs.iter()).collect(),
        _ => Vec::new(),
    }
}

fn node_convs_mut(node: &mut Node) -> Vec<&mut ConvLayer> {
    match node {
        Node::Conv(c) => vec![c],
        Node::Residual(b) => vec![&mut b.conv1, &mut b.conv2],
        Node::Inception(b) => b.branches.iter_mut().flat_map(|br| br.convs.iter_mut()).collect(),
        _ => Vec::new(),
    }
}

impl ModelGraph {
    pub fn empty(input_shape: [usize; 3], classes: usize) -> Self {
        ModelGraph {
            family: Family::Conv,
            nodes: Vec::new(),
            input_shape,
            classes,
        }
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        self.nodes.iter().flat_map(node_convs).collect()
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        self.nodes.iter_mut().flat_map(node_convs_mut).collect()
    }

    /// `(name, filters)` for every conv layer.
    pub fn filter_counts(&self) -> Vec<(String, usize)> {
        self.conv_layers()
            .into_iter()
            .map(|c| (c.name.clone(), c.filters()))
            .collect()
    }

    /// Parameter tensors in canonical slot order, with their names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node {
                Node::Dense(d) => {
                    out.push((format!("{}.weight", d.name), &d.weights));
                    out.push((format!("{}.bias", d.name), &d.bias));
                }
                other => {
                    for c in node_convs(other) {
                        out.push((format!("{}.weight", c.name), &c.weights));
                        out.push((format!("{}.bias", c.name), &c.bias));
                    }
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match node {
                Node::Dense(d) => {
                    out.push(&mut d.weights);
                    out.push(&mut d.bias);
                }
                other => {
                    for c in node_convs_mut(other) {
                        out.push(&mut c.weights);
                        out.push(&mut c.bias);
                    }
                }
            }
        }
        out
    }

    /// Output shape after each node, plus FLOP totals for one sample.
    pub fn infer(&self) -> Result<(Vec<ActShape>, FlopCount)> {
        let [c, h, w] = self.input_shape;
        let mut shape = ActShape::Map { c, h, w };
        let mut flops = FlopCount::default();
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            shape = node.infer(shape, &mut flops)?;
            shapes.push(shape);
        }
        Ok((shapes, flops))
    }

    pub fn output_shape(&self) -> Result<ActShape> {
        let (shapes, _) = self.infer()?;
        let [c, h, w] = self.input_shape;
        Ok(shapes.last().copied().unwrap_or(ActShape::Map { c, h, w }))
    }

    /// Checks that shapes flow end to end into `[classes]` logits.
    pub fn validate(&self) -> Result<()> {
        match self.output_shape()? {
            ActShape::Flat(n) if n == self.classes => Ok(()),
            other => Err(Error::shape(
                "shape inference",
                format!("model produces {other:?}, expected {} logits", self.classes),
            )),
        }
    }

    /// Records the forward pass on `tape` and returns the logits handle.
    pub fn record(&self, tape: &mut Tape, batch: Var) -> Result<Var> {
        let shape = tape.value(batch).shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {shape:?} does not match model input {:?}",
                    self.input_shape
                ),
            ));
        }
        let mut slots = 0;
        let mut x = batch;
        for node in &self.nodes {
            x = node.record(tape, &mut slots, x)?;
        }
        Ok(x)
    }

    /// Logits `[B, classes]` for a `[B, C, H, W]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let out = self.record(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross-entropy on one batch and the gradient of every parameter, in slot order.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let logits = self.record(&mut tape, x)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let n = self.params().len();
        let grads = (0..n)
            .map(|slot| {
                grads
                    .take(slot)
                    .ok_or_else(|| Error::Consistency(format!("no gradient for parameter slot {slot}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, grads))
    }

    /// Rounds every parameter to 32-bit precision, the width used on the wire.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.round_to_f32();
        }
    }

    /// True when both graphs have the same node kinds and parameter shapes.
    pub fn same_architecture(&self, other: &ModelGraph) -> bool {
        self.input_shape == other.input_shape
            && self.classes == other.classes
            && self.nodes.len() == other.nodes.len()
            && self
                .named_params()
                .iter()
                .map(|(n, t)| (n.as_str(), t.shape()))
                .eq(other.named_params().iter().map(|(n, t)| (n.as_str(), t.shape())))
    }
}

/// Family, widths and data shape needed to construct a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    /// conv: one width per conv stage; resnet: stem then one conv1 width per block;
    /// inception: three branch widths (1x1, kxk, pool-proj) per block.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub input_shape: [usize; 3],
    pub classes: usize,
}

impl ArchitectureSpec {
    pub fn default_for(family: Family, input_shape: [usize; 3], classes: usize) -> Self {
        let widths = match family {
            Family::Conv => vec![32, 64],
            Family::Resnet => vec![16, 16, 16, 16],
            Family::Inception => vec![8, 16, 8, 16, 32, 16, 16, 32, 16],
        };
        ArchitectureSpec {
            family,
            widths,
            kernel: 5,
            input_shape,
            classes,
        }
    }
}

fn dense_head(nodes: &mut Vec<Node>, features: ActShape, classes: usize) {
    nodes.push(Node::Flatten);
    nodes.push(Node::Dense(DenseLayer::new("fc", features.elements(), classes)));
}

/// Builds a zero-initialised graph; see [`init_weights`].
pub fn build_architecture(spec: &ArchitectureSpec) -> Result<ModelGraph> {
    let [in_c, _, _] = spec.input_shape;
    if spec.classes < 1 || spec.input_shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!(
            "invalid data shape {:?} with {} classes",
            spec.input_shape, spec.classes
        )));
    }
    if spec.kernel % 2 == 0 {
        return Err(Error::Config(format!("kernel {} must be odd", spec.kernel)));
    }
    if spec.widths.iter().any(|&w| w == 0) {
        return Err(Error::Config("layer widths must be positive".into()));
    }
    let k = spec.kernel;
    let mut g = ModelGraph {
        family: spec.family,
        nodes: Vec::new(),
        input_shape: spec.input_shape,
        classes: spec.classes,
    };
    match spec.family {
        Family::Conv => {
            if spec.widths.is_empty() {
                return Err(Error::Config("conv family needs at least one width".into()));
            }
            let mut c = in_c;
            for (i, &w) in spec.widths.iter().enumerate() {
                g.nodes.push(Node::Conv(ConvLayer::new(format!("conv{}", i + 1), w, c, k, true)));
                g.nodes.push(Node::Relu);
                g.nodes.push(Node::Pool(PoolSpec::halve()));
                c = w;
            }
        }
        Family::Resnet => {
            let Some((&stem, blocks)) = spec.widths.split_first() else {
                return Err(Error::Config("resnet family needs a stem width".into()));
            };
            // The stem feeds the first skip path, so its width is fixed.
            g.nodes.push(Node::Conv(ConvLayer::new("stem", stem, in_c, k, false)));
            g.nodes.push(Node::Relu);
            g.nodes.push(Node::Pool(PoolSpec::halve()));
            for (i, &w) in blocks.iter().enumerate() {
                g.nodes.push(Node::Residual(ResidualBlock {
                    conv1: ConvLayer::new(format!("res{}.conv1", i + 1), w, stem, k, true),
                    conv2: ConvLayer::new(format!("res{}.conv2", i + 1), stem, w, k, false),
                }));
            }
            g.nodes.push(Node::Pool(PoolSpec::halve()));
        }
        Family::Inception => {
            if spec.widths.is_empty() || spec.widths.len() % 3 != 0 {
                return Err(Error::Config(
                    "inception family needs three branch widths per block".into(),
                ));
            }
            let mut c = in_c;
            for (i, w) in spec.widths.chunks_exact(3).enumerate() {
                let name = format!("inc{}", i + 1);
                let block = InceptionBlock {
                    branches: vec![
                        Branch {
                            pool: None,
                            convs: vec![ConvLayer::new(format!("{name}.b1x1"), w[0], c, 1, true)],
                        },
                        Branch {
                            pool: None,
                            convs: vec![ConvLayer::new(format!("{name}.b{k}x{k}"), w[1], c, k, true)],
                        },
                        Branch {
                            pool: Some(PoolSpec::same3()),
                            convs: vec![ConvLayer::new(format!("{name}.bpool"), w[2], c, 1, true)],
                        },
                    ],
                    name,
                };
                c = block.out_channels();
                g.nodes.push(Node::Inception(block));
                g.nodes.push(Node::Pool(PoolSpec::halve()));
            }
        }
    }
    let (shapes, _) = g.infer()?;
    let features = *shapes
        .last()
        .ok_or_else(|| Error::Consistency("empty architecture".into()))?;
    dense_head(&mut g.nodes, features, spec.classes);
    g.validate()?;
    Ok(g)
}

/// Uniform bound `sqrt(6 / fan_in)`, giving standard deviation `sqrt(2 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Fan-in-scaled uniform weights, zero biases; deterministic in `seed`.
pub fn init_weights(mut model: ModelGraph, seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for node in &mut model.nodes {
        let mut fill = |weights: &mut Tensor, fan_in: usize| {
            let bound = init_bound(fan_in);
            for v in weights.data_mut() {
                *v = rng.random_range(-bound..bound) as f32 as f64;
            }
        };
        match node {
            Node::Dense(d) => {
                let fan_in = d.inputs();
                fill(&mut d.weights, fan_in);
                d.bias.data_mut().fill(0.0);
            }
            other => {
                for c in node_convs_mut(other) {
                    let fan_in = c.in_channels() * c.kernel() * c.kernel();
                    fill(&mut c.weights, fan_in);
                    c.bias.data_mut().fill(0.0);
                }
            }
        }
    }
    model
}

/// Total weight and bias elements.
pub fn count_params(model: &ModelGraph) -> usize {
    model.params().iter().map(|t| t.len()).sum()
}

/// FLOPs for one sample; multiply-accumulate counts as two.
pub fn count_flops(model: &ModelGraph) -> Result<FlopCount> {
    Ok(model.infer()?.1)
}
