//! Sequential model graphs and the ENet-style mini architecture.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::argmax::{argmax_parallel, argmax_serial};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nn::block::{block_forward, relu_in_place, Middle, ResidualBlock, Skip, StageTag};
use crate::nn::conv::{conv_forward, ConvFilter};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    Conv { filter: ConvFilter<S>, relu: bool },
    Block(ResidualBlock<S>),
    /// Nearest-neighbour upsampling by an integer factor.
    Upsample { factor: usize },
    /// Per-pixel argmax over channels; always the last layer.
    ArgMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<S> {
    pub name: String,
    pub layer: Layer<S>,
}

/// An ordered chain of named layers ending in an argmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<S> {
    input_channels: usize,
    classes: usize,
    nodes: Vec<Node<S>>,
}

pub fn upsample_nearest<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    if factor == 0 {
        return Err(Error::config("upsample factor must be >= 1"));
    }
    let (h, w) = (x.h(), x.w());
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros((x.n(), x.c(), ho, wo))?;
    for n in 0..x.n() {
        for c in 0..x.c() {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                let row = &src[(y / factor) * w..(y / factor + 1) * w];
                for (xo, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                    *d = row[xo / factor];
                }
            }
        }
    }
    Ok(out)
}

impl<S: Scalar> Layer<S> {
    pub fn tag_name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Block(_) => "block",
            Layer::Upsample { .. } => "upsample",
            Layer::ArgMax => "argmax",
        }
    }

    /// Output channel count given `c` input channels.
    pub fn out_channels(&self, c: usize) -> usize {
        match self {
            Layer::Conv { filter, .. } => filter.n_out(),
            Layer::Block(b) => b.out_channels(),
            Layer::Upsample { .. } | Layer::ArgMax => c,
        }
    }

    pub fn in_channels(&self) -> Option<usize> {
        match self {
            Layer::Conv { filter, .. } => Some(filter.c_in()),
            Layer::Block(b) => Some(b.in_channels()),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv { filter, .. } => filter.param_count(),
            Layer::Block(b) => b.param_count(),
            _ => 0,
        }
    }

    /// Forward pass of a non-head layer.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Conv { filter, relu } => {
                let mut y = conv_forward(x, filter)?;
                if *relu {
                    relu_in_place(&mut y);
                }
                Ok(y)
            }
            Layer::Block(b) => block_forward(x, b),
            Layer::Upsample { factor } => upsample_nearest(x, *factor),
            Layer::ArgMax => Err(Error::shape("argmax head has no tensor output")),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Layer<T> {
        match self {
            Layer::Conv { filter, relu } => Layer::Conv {
                filter: filter.cast(),
                relu: *relu,
            },
            Layer::Block(b) => Layer::Block(b.cast()),
            Layer::Upsample { factor } => Layer::Upsample { factor: *factor },
            Layer::ArgMax => Layer::ArgMax,
        }
    }
}

impl<S: Scalar> ModelGraph<S> {
    pub fn new(input_channels: usize, classes: usize, nodes: Vec<Node<S>>) -> Result<Self> {
        let g = ModelGraph {
            input_channels,
            classes,
            nodes,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input channel count must be positive"));
        }
        let heads = self.nodes.iter().filter(|n| matches!(n.layer, Layer::ArgMax)).count();
        if heads != 1 || !matches!(self.nodes.last().map(|n| &n.layer), Some(Layer::ArgMax)) {
            return Err(Error::config("graph needs exactly one argmax head, placed last"));
        }
        let mut seen = std::collections::HashSet::new();
        let mut c = self.input_channels;
        for node in &self.nodes {
            if !seen.insert(node.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name {}", node.name)));
            }
            if let Layer::Block(b) = &node.layer {
                b.validate()
                    .map_err(|e| Error::shape(format!("{}: {e}", node.name)))?;
            }
            if let Layer::Upsample { factor: 0 } = node.layer {
                return Err(Error::config(format!("{}: zero upsample factor", node.name)));
            }
            if let Some(cin) = node.layer.in_channels() {
                if cin != c {
                    return Err(Error::shape(format!(
                        "{} expects {cin} channels but receives {c}",
                        node.name
                    )));
                }
            }
            c = node.layer.out_channels(c);
        }
        if c != self.classes {
            return Err(Error::shape(format!(
                "head receives {c} channels for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn nodes(&self) -> &[Node<S>] {
        &self.nodes
    }

    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::config(format!("no layer named {name}")))
    }

    pub fn block(&self, name: &str) -> Result<&ResidualBlock<S>> {
        match &self.nodes[self.node_index(name)?].layer {
            Layer::Block(b) => Ok(b),
            _ => Err(Error::config(format!("{name} is not a residual block"))),
        }
    }

    /// Replaces a block, re-validating the graph.
    pub fn with_block(&self, name: &str, block: ResidualBlock<S>) -> Result<Self> {
        let idx = self.node_index(name)?;
        let mut g = self.clone();
        match &mut g.nodes[idx].layer {
            Layer::Block(b) => *b = block,
            _ => return Err(Error::config(format!("{name} is not a residual block"))),
        }
        g.validate()?;
        Ok(g)
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.layer, Layer::Block(_)))
            .map(|n| n.name.as_str())
            .collect()
    }

    /// Every convolution in the graph with a dotted path name.
    pub fn conv_filters(&self) -> Vec<(String, &ConvFilter<S>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.layer {
                Layer::Conv { filter, .. } => out.push((node.name.clone(), filter)),
                Layer::Block(b) => {
                    for (name, f) in b.chain_names().iter().zip(b.chain()) {
                        out.push((format!("{}.{name}", node.name), f));
                    }
                    if let Skip::Projection(p) = &b.skip {
                        out.push((format!("{}.skip", node.name), p));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn conv_filters_mut(&mut self) -> Vec<(String, &mut ConvFilter<S>)> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            let base = node.name.clone();
            match &mut node.layer {
                Layer::Conv { filter, .. } => out.push((base, filter)),
                Layer::Block(b) => {
                    let names = b.chain_names();
                    let has_proj = matches!(b.skip, Skip::Projection(_));
                    let ResidualBlock {
                        conv1,
                        middle,
                        conv3,
                        skip,
                        ..
                    } = b;
                    let mut chain: Vec<&mut ConvFilter<S>> = vec![conv1];
                    match middle {
                        Middle::Single(f) => chain.push(f),
                        Middle::Factorized { vert, horiz } => {
                            chain.push(vert);
                            chain.push(horiz);
                        }
                    }
                    chain.push(conv3);
                    for (name, f) in names.iter().zip(chain) {
                        out.push((format!("{base}.{name}"), f));
                    }
                    if has_proj {
                        if let Skip::Projection(p) = skip {
                            out.push((format!("{base}.skip"), p));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.layer.param_count()).sum()
    }

    /// Runs layers `[from, to)` on `x`.
    pub fn forward_range(&self, x: &Tensor<S>, from: usize, to: usize) -> Result<Tensor<S>> {
        let mut x = x.clone();
        for node in &self.nodes[from..to] {
            x = node
                .layer
                .forward(&x)
                .map_err(|e| Error::shape(format!("{}: {e}", node.name)))?;
        }
        Ok(x)
    }

    /// Class scores: everything except the argmax head.
    pub fn forward_scores(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        if input.c() != self.input_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {}",
                self.input_channels,
                input.c()
            )));
        }
        self.forward_range(input, 0, self.nodes.len() - 1)
    }

    /// Full inference including the argmax head. `workers == 1` uses the serial head.
    pub fn predict(&self, input: &Tensor<S>, workers: usize) -> Result<LabelMap> {
        let scores = self.forward_scores(input)?;
        if workers <= 1 {
            Ok(argmax_serial(&scores))
        } else {
            Ok(argmax_parallel(&scores, workers))
        }
    }

    pub fn cast<T: Scalar>(&self) -> ModelGraph<T> {
        ModelGraph {
            input_channels: self.input_channels,
            classes: self.classes,
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    name: n.name.clone(),
                    layer: n.layer.cast(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Spatial {
    Regular,
    Dilated(usize),
    Asymmetric(usize),
}

struct Init<'a> {
    rng: &'a mut rng::Rng,
}

impl Init<'_> {
    fn conv<S: Scalar>(
        &mut self,
        n_out: usize,
        c_in: usize,
        k: (usize, usize),
        stride: usize,
        dilation: usize,
        padding: (usize, usize),
        gain: f64,
    ) -> ConvFilter<S> {
        let fan_in = (c_in * k.0 * k.1) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
        let weights = Tensor::from_fn((n_out, c_in, k.0, k.1), |_, _, _, _| {
            S::from_f64_lossy(normal.sample(self.rng))
        })
        .expect("positive dims");
        let bias = (0..n_out)
            .map(|_| S::from_f64_lossy(self.rng.random_range(-0.05..0.05)))
            .collect();
        ConvFilter::new(weights, bias, stride, dilation, padding).expect("consistent filter")
    }

    fn block<S: Scalar>(
        &mut self,
        c_in: usize,
        c_out: usize,
        internal: usize,
        spatial: Spatial,
        downsample: bool,
        stage: StageTag,
    ) -> ResidualBlock<S> {
        let conv1 = if downsample {
            self.conv(internal, c_in, (2, 2), 2, 1, (0, 0), 1.0)
        } else {
            self.conv(internal, c_in, (1, 1), 1, 1, (0, 0), 1.0)
        };
        let middle = match spatial {
            Spatial::Regular => Middle::Single(self.conv(internal, internal, (3, 3), 1, 1, (1, 1), 1.0)),
            Spatial::Dilated(d) => Middle::Single(self.conv(internal, internal, (3, 3), 1, d, (d, d), 1.0)),
            Spatial::Asymmetric(k) => Middle::Factorized {
                vert: self.conv(internal, internal, (k, 1), 1, 1, (k / 2, 0), 1.0),
                horiz: self.conv(internal, internal, (1, k), 1, 1, (0, k / 2), 1.0),
            },
        };
        // A damped expansion keeps a deep residual stack close to identity at initialization.
        let conv3 = self.conv(c_out, internal, (1, 1), 1, 1, (0, 0), 0.3);
        let skip = if downsample {
            Skip::MaxPoolPad
        } else if c_in == c_out {
            Skip::Identity
        } else {
            Skip::Projection(self.conv(c_out, c_in, (1, 1), 1, 1, (0, 0), 1.0))
        };
        ResidualBlock {
            conv1,
            middle,
            conv3,
            skip,
            inner_relu: true,
            output_relu: true,
            stage,
            no_prune: false,
        }
    }
}

/// Block layout of one 128-channel encoder stage.
const DEEP_STAGE: [Spatial; 8] = [
    Spatial::Regular,
    Spatial::Dilated(2),
    Spatial::Asymmetric(5),
    Spatial::Dilated(4),
    Spatial::Regular,
    Spatial::Dilated(8),
    Spatial::Asymmetric(5),
    Spatial::Dilated(16),
];

/// Builds the ENet-style segmentation graph with randomly initialized weights.
///
/// Layout (channel counts at `width = 1`): a 3×3 stride-2 initial conv to 16;
/// a shallow stage of one downsampling block plus four regular blocks at 64;
/// two deep stages at 128 (a downsampling block, then regular, dilated and
/// asymmetric blocks); a two-block decoder at 64 and 16 channels with nearest
/// upsampling; a 1×1 classifier to `classes`; a final ×2 upsample and the argmax
/// head. Bottleneck width is a quarter of the block width, so the last residual
/// block runs on 4 internal channels and is tagged `no_prune`. Shallow-stage and
/// decoder blocks carry [`StageTag::Shallow`], the 128-channel stages
/// [`StageTag::Deep`]. The output resolution equals the input resolution when
/// both input dimensions are multiples of 8.
pub fn build_enet_mini<S: Scalar>(classes: usize, width: f64, seed: u64) -> Result<ModelGraph<S>> {
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if !(width.is_finite() && width > 0.0) {
        return Err(Error::config(format!("width multiplier must be positive, got {width}")));
    }
    let ch = |base: usize| ((base as f64 * width).round() as usize).max(1);
    let (c16, c64, c128) = (ch(16), ch(64), ch(128));
    let (i16, i64_, i128) = (ch(4), ch(16), ch(32));

    let mut r = rng::stream(seed, rng::stream_id("build_enet_mini"));
    let mut init = Init { rng: &mut r };
    let mut nodes = Vec::new();
    let mut push = |name: String, layer: Layer<S>| nodes.push(Node { name, layer });

    push(
        "initial".into(),
        Layer::Conv {
            filter: init.conv(c16, 3, (3, 3), 2, 1, (1, 1), 1.0),
            relu: true,
        },
    );
    push(
        "stage1.down".into(),
        Layer::Block(init.block(c16, c64, i64_, Spatial::Regular, true, StageTag::Shallow)),
    );
    for i in 1..=4 {
        push(
            format!("stage1.block{i}"),
            Layer::Block(init.block(c64, c64, i64_, Spatial::Regular, false, StageTag::Shallow)),
        );
    }
    push(
        "stage2.down".into(),
        Layer::Block(init.block(c64, c128, i128, Spatial::Regular, true, StageTag::Deep)),
    );
    for stage in [2, 3] {
        for (i, spatial) in DEEP_STAGE.iter().enumerate() {
            push(
                format!("stage{stage}.block{}", i + 1),
                Layer::Block(init.block(c128, c128, i128, *spatial, false, StageTag::Deep)),
            );
        }
    }
    push(
        "decoder.proj1".into(),
        Layer::Conv {
            filter: init.conv(c64, c128, (1, 1), 1, 1, (0, 0), 1.0),
            relu: true,
        },
    );
    push("decoder.up1".into(), Layer::Upsample { factor: 2 });
    push(
        "decoder.block1".into(),
        Layer::Block(init.block(c64, c64, i64_, Spatial::Regular, false, StageTag::Shallow)),
    );
    push(
        "decoder.proj2".into(),
        Layer::Conv {
            filter: init.conv(c16, c64, (1, 1), 1, 1, (0, 0), 1.0),
            relu: true,
        },
    );
    push("decoder.up2".into(), Layer::Upsample { factor: 2 });
    let mut last = init.block(c16, c16, i16, Spatial::Regular, false, StageTag::Shallow);
    last.no_prune = true;
    push("decoder.block2".into(), Layer::Block(last));
    push(
        "classifier".into(),
        Layer::Conv {
            filter: init.conv(classes, c16, (1, 1), 1, 1, (0, 0), 1.0),
            relu: false,
        },
    );
    push("upsample".into(), Layer::Upsample { factor: 2 });
    push("argmax".into(), Layer::ArgMax);
    ModelGraph::new(3, classes, nodes)
}
