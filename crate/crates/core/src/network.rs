//! Mini VGG / ResNet graphs, their prunable-structure registry, and the
//! tape-recorded forward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    update_running_stats, BatchNormConfig, BatchNormState, Mode, ObservedStats, Tape, Var,
};
use crate::data::Normalization;
use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    MiniVgg,
    MiniResnet,
}

impl ArchKind {
    pub fn tag(self) -> &'static str {
        match self {
            ArchKind::MiniVgg => "mini_vgg",
            ArchKind::MiniResnet => "mini_resnet",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "mini_vgg" => Some(ArchKind::MiniVgg),
            "mini_resnet" => Some(ArchKind::MiniResnet),
            _ => None,
        }
    }
}

/// Architecture recipe. `stage_depths` counts convs per stage for VGG and
/// residual blocks per stage for ResNet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub width_multiplier: f64,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_side: usize,
}

impl ArchSpec {
    /// 6 convs in 3 stages of widths `w, 2w, 4w`, then a dense head.
    pub fn mini_vgg(
        base_width: usize,
        num_classes: usize,
        input_channels: usize,
        input_side: usize,
    ) -> Self {
        Self {
            kind: ArchKind::MiniVgg,
            stage_widths: vec![base_width, 2 * base_width, 4 * base_width],
            stage_depths: vec![2, 2, 2],
            width_multiplier: 1.0,
            num_classes,
            input_channels,
            input_side,
        }
    }

    /// Stem conv, 3 stages × 2 residual blocks of widths `w, 2w, 4w`.
    pub fn mini_resnet(
        base_width: usize,
        num_classes: usize,
        input_channels: usize,
        input_side: usize,
    ) -> Self {
        Self {
            kind: ArchKind::MiniResnet,
            stage_depths: vec![2, 2, 2],
            ..Self::mini_vgg(base_width, num_classes, input_channels, input_side)
        }
    }

    /// Stage widths after the multiplier, rounded up.
    pub fn scaled_widths(&self) -> Vec<usize> {
        self.stage_widths
            .iter()
            .map(|&w| (w as f64 * self.width_multiplier - 1e-9).ceil().max(0.0) as usize)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub prunable: bool,
    /// Output channel positions in the originally built network.
    pub out_origin: Vec<usize>,
    pub in_origin: Vec<usize>,
}

impl Conv {
    fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, prunable: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding: kernel / 2,
            prunable,
            out_origin: (0..c_out).collect(),
            in_origin: (0..c_in).collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Weights of one output filter.
    pub fn filter(&self, f: usize) -> &[f32] {
        let len = self.weight.len() / self.out_channels();
        &self.weight.values()[f * len..(f + 1) * len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BatchNormState,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            state: BatchNormState::identity(channels),
        }
    }
}

/// Convolution followed by batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvUnit {
    fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, prunable: bool) -> Self {
        Self {
            conv: Conv::zeros(c_in, c_out, kernel, stride, prunable),
            bn: BatchNorm::new(c_out),
        }
    }
}

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
    pub projection: Option<ConvUnit>,
    pub stage: usize,
    /// Block position in the originally built network.
    pub origin: usize,
}

impl ResidualBlock {
    /// Identity-join blocks can be spliced out without reshaping anything.
    pub fn is_identity(&self) -> bool {
        self.projection.is_none() && self.conv1.conv.stride == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    /// `[D, num_classes]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub in_origin: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerNode {
    /// conv → batchnorm → relu
    ConvBnRelu(ConvUnit),
    MaxPool {
        size: usize,
        stride: usize,
    },
    Residual(ResidualBlock),
    GlobalAvgPool,
    Dense(DenseHead),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructureKind {
    Filter { layer: usize, filter: usize },
    Block { block: usize },
}

impl std::fmt::Display for StructureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StructureKind::Filter { layer, filter } => write!(f, "filter:{layer}:{filter}"),
            StructureKind::Block { block } => write!(f, "block:{block}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructureId {
    pub kind: StructureKind,
    pub prunable: bool,
}

/// Where a conv lives inside the node list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvSlot {
    Main,
    First,
    Second,
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLoc {
    pub node: usize,
    pub slot: ConvSlot,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter leaves, in [`Network::params`] order.
    pub params: Vec<Var>,
    /// Post-relu map of every prunable conv, keyed by conv index.
    pub filter_maps: Vec<(usize, Var)>,
    /// Output of each residual block, in block order.
    pub block_outputs: Vec<Var>,
    observed: Vec<Option<ObservedStats>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchSpec,
    pub normalization: Normalization,
    pub nodes: Vec<LayerNode>,
    pub bn_config: BatchNormConfig,
    pub epoch: usize,
    pub seed: u64,
}

impl Network {
    /// Builds and He-initializes a network from `seed`.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let widths = arch.scaled_widths();
        if arch.stage_widths.is_empty() || widths.len() != arch.stage_depths.len() {
            return Err(invalid(
                "build_network",
                "stage widths and depths must be non-empty and aligned",
            ));
        }
        if let Some(s) = widths.iter().position(|&w| w == 0) {
            return Err(invalid(
                "build_network",
                format!("stage {s} has zero channels"),
            ));
        }
        if let Some(s) = arch.stage_depths.iter().position(|&d| d == 0) {
            return Err(invalid(
                "build_network",
                format!("stage {s} has zero depth"),
            ));
        }
        if arch.num_classes == 0 || arch.input_channels == 0 {
            return Err(invalid(
                "build_network",
                "num_classes and input_channels must be positive",
            ));
        }
        let downsamples = widths.len() - 1;
        if arch.input_side >> downsamples == 0 {
            return Err(invalid(
                "build_network",
                format!(
                    "input side {} too small for {} stages",
                    arch.input_side,
                    widths.len()
                ),
            ));
        }
        let mut nodes = Vec::new();
        let mut channels = arch.input_channels;
        match arch.kind {
            ArchKind::MiniVgg => {
                for (s, (&w, &d)) in widths.iter().zip(&arch.stage_depths).enumerate() {
                    if s > 0 {
                        nodes.push(LayerNode::MaxPool { size: 2, stride: 2 });
                    }
                    for _ in 0..d {
                        nodes.push(LayerNode::ConvBnRelu(ConvUnit::new(
                            channels, w, 3, 1, true,
                        )));
                        channels = w;
                    }
                }
            }
            ArchKind::MiniResnet => {
                nodes.push(LayerNode::ConvBnRelu(ConvUnit::new(
                    channels, widths[0], 3, 1, false,
                )));
                channels = widths[0];
                let mut origin = 0;
                for (s, (&w, &d)) in widths.iter().zip(&arch.stage_depths).enumerate() {
                    for b in 0..d {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let projection = (stride != 1 || channels != w)
                            .then(|| ConvUnit::new(channels, w, 1, stride, false));
                        nodes.push(LayerNode::Residual(ResidualBlock {
                            conv1: ConvUnit::new(channels, w, 3, stride, true),
                            conv2: ConvUnit::new(w, w, 3, 1, false),
                            projection,
                            stage: s,
                            origin,
                        }));
                        origin += 1;
                        channels = w;
                    }
                }
            }
        }
        nodes.push(LayerNode::GlobalAvgPool);
        nodes.push(LayerNode::Dense(DenseHead {
            weight: Tensor::zeros(&[channels, arch.num_classes]),
            bias: Tensor::zeros(&[arch.num_classes]),
            in_origin: (0..channels).collect(),
        }));
        let mut net = Self {
            arch: arch.clone(),
            normalization: Normalization::identity(arch.input_channels),
            nodes,
            bn_config: BatchNormConfig::default(),
            epoch: 0,
            seed,
        };
        net.reinitialize(seed);
        net.validate()?;
        Ok(net)
    }

    /// Redraws every parameter (He fan-in normal) for the current topology
    /// and resets batchnorm state. Origins are preserved.
    pub fn reinitialize(&mut self, seed: u64) {
        let mut rng = seed::rng(seed, 0x1417);
        fn he(t: &mut Tensor, fan_in: usize, rng: &mut impl Rng) {
            let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
            t.values_mut()
                .iter_mut()
                .for_each(|v| *v = dist.sample(rng));
        }
        let init_unit = |u: &mut ConvUnit, rng: &mut rand_chacha::ChaCha8Rng| {
            let fan_in = u.conv.in_channels() * u.conv.kernel() * u.conv.kernel();
            he(&mut u.conv.weight, fan_in, rng);
            u.conv.bias.values_mut().fill(0.0);
            *u = ConvUnit {
                conv: u.conv.clone(),
                bn: BatchNorm::new(u.conv.out_channels()),
            };
        };
        for node in &mut self.nodes {
            match node {
                LayerNode::ConvBnRelu(u) => init_unit(u, &mut rng),
                LayerNode::Residual(b) => {
                    init_unit(&mut b.conv1, &mut rng);
                    init_unit(&mut b.conv2, &mut rng);
                    if let Some(p) = &mut b.projection {
                        init_unit(p, &mut rng);
                    }
                }
                LayerNode::Dense(d) => {
                    let fan_in = d.weight.shape()[0];
                    he(&mut d.weight, fan_in, &mut rng);
                    d.bias.values_mut().fill(0.0);
                }
                LayerNode::MaxPool { .. } | LayerNode::GlobalAvgPool => {}
            }
        }
        self.seed = seed;
        self.epoch = 0;
    }

    pub fn kind(&self) -> ArchKind {
        self.arch.kind
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Every conv in forward order: VGG convs, or stem then per block
    /// `conv1, conv2, projection`.
    pub fn conv_locs(&self) -> Vec<ConvLoc> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                LayerNode::ConvBnRelu(_) => out.push(ConvLoc {
                    node: i,
                    slot: ConvSlot::Main,
                }),
                LayerNode::Residual(b) => {
                    out.push(ConvLoc {
                        node: i,
                        slot: ConvSlot::First,
                    });
                    out.push(ConvLoc {
                        node: i,
                        slot: ConvSlot::Second,
                    });
                    if b.projection.is_some() {
                        out.push(ConvLoc {
                            node: i,
                            slot: ConvSlot::Projection,
                        });
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn unit(&self, loc: ConvLoc) -> &ConvUnit {
        match (&self.nodes[loc.node], loc.slot) {
            (LayerNode::ConvBnRelu(u), ConvSlot::Main) => u,
            (LayerNode::Residual(b), ConvSlot::First) => &b.conv1,
            (LayerNode::Residual(b), ConvSlot::Second) => &b.conv2,
            (LayerNode::Residual(b), ConvSlot::Projection) => {
                b.projection.as_ref().expect("projection slot")
            }
            _ => panic!("no conv at {loc:?}"),
        }
    }

    pub fn unit_mut(&mut self, loc: ConvLoc) -> &mut ConvUnit {
        match (&mut self.nodes[loc.node], loc.slot) {
            (LayerNode::ConvBnRelu(u), ConvSlot::Main) => u,
            (LayerNode::Residual(b), ConvSlot::First) => &mut b.conv1,
            (LayerNode::Residual(b), ConvSlot::Second) => &mut b.conv2,
            (LayerNode::Residual(b), ConvSlot::Projection) => {
                b.projection.as_mut().expect("projection slot")
            }
            _ => panic!("no conv at {loc:?}"),
        }
    }

    pub fn blocks(&self) -> Vec<&ResidualBlock> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                LayerNode::Residual(b) => Some(b),
                _ => None,
            })
            .collect()
    }

    /// Node index of the `block`-th residual block.
    pub fn block_node(&self, block: usize) -> Option<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, LayerNode::Residual(_)))
            .nth(block)
            .map(|(i, _)| i)
    }

    pub fn dense(&self) -> &DenseHead {
        match self.nodes.last() {
            Some(LayerNode::Dense(d)) => d,
            _ => panic!("network without dense head"),
        }
    }

    /// Filters of every prunable conv, then every residual block.
    pub fn structures(&self) -> Vec<StructureId> {
        let mut out = Vec::new();
        for (layer, loc) in self.conv_locs().into_iter().enumerate() {
            let conv = &self.unit(loc).conv;
            if conv.prunable {
                out.extend((0..conv.out_channels()).map(|filter| StructureId {
                    kind: StructureKind::Filter { layer, filter },
                    prunable: true,
                }));
            }
        }
        for (block, b) in self.blocks().into_iter().enumerate() {
            out.push(StructureId {
                kind: StructureKind::Block { block },
                prunable: b.is_identity(),
            });
        }
        out
    }

    pub fn prunable_filters(&self) -> Vec<StructureId> {
        self.structures()
            .into_iter()
            .filter(|s| s.prunable && matches!(s.kind, StructureKind::Filter { .. }))
            .collect()
    }

    pub fn prunable_blocks(&self) -> Vec<StructureId> {
        self.structures()
            .into_iter()
            .filter(|s| s.prunable && matches!(s.kind, StructureKind::Block { .. }))
            .collect()
    }

    /// Compact fingerprint of the topology (conv widths and block origins).
    pub fn topology_signature(&self) -> String {
        let widths: Vec<String> = self
            .conv_locs()
            .into_iter()
            .map(|l| self.unit(l).conv.out_channels().to_string())
            .collect();
        let blocks: Vec<String> = self.blocks().iter().map(|b| b.origin.to_string()).collect();
        format!(
            "{}|{}|{}",
            self.arch.kind.tag(),
            widths.join(","),
            blocks.join(",")
        )
    }

    /// Trainable tensors in forward order with dotted names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        fn unit<'a>(out: &mut Vec<(String, &'a Tensor)>, p: &str, u: &'a ConvUnit) {
            out.push((format!("{p}.conv.weight"), &u.conv.weight));
            out.push((format!("{p}.conv.bias"), &u.conv.bias));
            out.push((format!("{p}.bn.gamma"), &u.bn.gamma));
            out.push((format!("{p}.bn.beta"), &u.bn.beta));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                LayerNode::ConvBnRelu(u) => unit(&mut out, &format!("nodes.{i}"), u),
                LayerNode::Residual(b) => {
                    unit(&mut out, &format!("nodes.{i}.conv1"), &b.conv1);
                    unit(&mut out, &format!("nodes.{i}.conv2"), &b.conv2);
                    if let Some(p) = &b.projection {
                        unit(&mut out, &format!("nodes.{i}.projection"), p);
                    }
                }
                LayerNode::Dense(d) => {
                    out.push((format!("nodes.{i}.dense.weight"), &d.weight));
                    out.push((format!("nodes.{i}.dense.bias"), &d.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        fn unit<'a>(out: &mut Vec<(String, &'a mut Tensor)>, p: &str, u: &'a mut ConvUnit) {
            out.push((format!("{p}.conv.weight"), &mut u.conv.weight));
            out.push((format!("{p}.conv.bias"), &mut u.conv.bias));
            out.push((format!("{p}.bn.gamma"), &mut u.bn.gamma));
            out.push((format!("{p}.bn.beta"), &mut u.bn.beta));
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            match node {
                LayerNode::ConvBnRelu(u) => unit(&mut out, &format!("nodes.{i}"), u),
                LayerNode::Residual(b) => {
                    unit(&mut out, &format!("nodes.{i}.conv1"), &mut b.conv1);
                    unit(&mut out, &format!("nodes.{i}.conv2"), &mut b.conv2);
                    if let Some(p) = &mut b.projection {
                        unit(&mut out, &format!("nodes.{i}.projection"), p);
                    }
                }
                LayerNode::Dense(d) => {
                    out.push((format!("nodes.{i}.dense.weight"), &mut d.weight));
                    out.push((format!("nodes.{i}.dense.bias"), &mut d.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match node {
                LayerNode::ConvBnRelu(u) => out.push(&mut u.bn.state),
                LayerNode::Residual(b) => {
                    out.push(&mut b.conv1.bn.state);
                    out.push(&mut b.conv2.bn.state);
                    if let Some(p) = &mut b.projection {
                        out.push(&mut p.bn.state);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Checks every edge's channel agreement, batchnorm widths, residual
    /// joins, origin bookkeeping, and spatial extents.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ChannelInconsistency(m));
        let mut channels = self.arch.input_channels;
        let mut side = self.arch.input_side;
        if self.normalization.channels() != channels {
            return fail(format!(
                "normalization has {} channels, input has {channels}",
                self.normalization.channels()
            ));
        }
        let check_unit = |u: &ConvUnit, c_in: usize, name: &str| -> Result<()> {
            let c = &u.conv;
            if c.in_channels() != c_in {
                return Err(Error::ChannelInconsistency(format!(
                    "{name} expects {} input channels, producer gives {c_in}",
                    c.in_channels()
                )));
            }
            let out = c.out_channels();
            if out == 0 {
                return Err(Error::ChannelInconsistency(format!(
                    "{name} has no filters"
                )));
            }
            if c.bias.len() != out
                || u.bn.gamma.len() != out
                || u.bn.beta.len() != out
                || u.bn.state.channels() != out
            {
                return Err(Error::ChannelInconsistency(format!(
                    "{name} bias/batchnorm width differs from {out} filters"
                )));
            }
            if c.out_origin.len() != out || c.in_origin.len() != c_in {
                return Err(Error::ChannelInconsistency(format!(
                    "{name} origin bookkeeping out of sync"
                )));
            }
            Ok(())
        };
        let conv_side = |side: usize, c: &Conv| (side + 2 * c.padding - c.kernel()) / c.stride + 1;
        let mut seen_dense = false;
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                LayerNode::ConvBnRelu(u) => {
                    check_unit(u, channels, &format!("node {i}"))?;
                    channels = u.conv.out_channels();
                    side = conv_side(side, &u.conv);
                }
                LayerNode::MaxPool { size, stride } => {
                    if side < *size {
                        return fail(format!("node {i}: max-pool window exceeds {side}px map"));
                    }
                    side = (side - size) / stride + 1;
                }
                LayerNode::Residual(b) => {
                    check_unit(&b.conv1, channels, &format!("node {i} conv1"))?;
                    check_unit(
                        &b.conv2,
                        b.conv1.conv.out_channels(),
                        &format!("node {i} conv2"),
                    )?;
                    let shortcut = match &b.projection {
                        Some(p) => {
                            check_unit(p, channels, &format!("node {i} projection"))?;
                            p.conv.out_channels()
                        }
                        None => {
                            if b.conv1.conv.stride != 1 {
                                return fail(format!("node {i}: strided block without projection"));
                            }
                            channels
                        }
                    };
                    if shortcut != b.conv2.conv.out_channels() {
                        return fail(format!(
                            "node {i}: residual join {} vs {shortcut} channels",
                            b.conv2.conv.out_channels()
                        ));
                    }
                    channels = shortcut;
                    side = conv_side(conv_side(side, &b.conv1.conv), &b.conv2.conv);
                }
                LayerNode::GlobalAvgPool => side = 1,
                LayerNode::Dense(d) => {
                    if d.weight.shape() != [channels, self.arch.num_classes]
                        || d.bias.len() != self.arch.num_classes
                        || d.in_origin.len() != channels
                    {
                        return fail(format!(
                            "dense head {:?} does not accept {channels} features",
                            d.weight.shape()
                        ));
                    }
                    seen_dense = true;
                }
            }
            if side == 0 {
                return fail(format!("node {i}: spatial extent collapsed"));
            }
        }
        if !seen_dense || !matches!(self.nodes.last(), Some(LayerNode::Dense(_))) {
            return fail("network must end with a dense head".into());
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        if shape.len() != 4
            || shape[1] != a.input_channels
            || shape[2] != a.input_side
            || shape[3] != a.input_side
        {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: shape.to_vec(),
                right: vec![0, a.input_channels, a.input_side, a.input_side],
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `input` holds raw `[0,1]` pixels;
    /// the stored normalization is applied as the first op so input
    /// gradients are in raw-pixel units.
    fn forward_impl(&self, tape: &mut Tape, input: Var, mode: Mode) -> Result<ForwardPass> {
        self.check_input(tape.shape(input))?;
        let cfg = self.bn_config;
        let mut params = Vec::new();
        let mut filter_maps = Vec::new();
        let mut block_outputs = Vec::new();
        let mut observed = Vec::new();
        let mut conv_index = 0usize;

        let run_unit = |tape: &mut Tape,
                        x: Var,
                        u: &ConvUnit,
                        params: &mut Vec<Var>,
                        observed: &mut Vec<Option<ObservedStats>>|
         -> Result<Var> {
            let w = tape.param(&u.conv.weight);
            let b = tape.param(&u.conv.bias);
            let g = tape.param(&u.bn.gamma);
            let be = tape.param(&u.bn.beta);
            params.extend([w, b, g, be]);
            let y = tape.conv2d(x, w, b, u.conv.stride, u.conv.padding)?;
            let (y, obs) = tape.batchnorm2d(y, g, be, &u.bn.state, mode, cfg)?;
            observed.push(obs);
            Ok(y)
        };

        let mut x = tape.channel_affine(
            input,
            &self.normalization.mean,
            &self.normalization.inv_std(),
        )?;
        for node in &self.nodes {
            x = match node {
                LayerNode::ConvBnRelu(u) => {
                    let y = run_unit(tape, x, u, &mut params, &mut observed)?;
                    let y = tape.relu(y);
                    if u.conv.prunable {
                        filter_maps.push((conv_index, y));
                    }
                    conv_index += 1;
                    y
                }
                LayerNode::MaxPool { size, stride } => tape.max_pool2d(x, *size, *stride)?,
                LayerNode::Residual(b) => {
                    let h = run_unit(tape, x, &b.conv1, &mut params, &mut observed)?;
                    let h = tape.relu(h);
                    if b.conv1.conv.prunable {
                        filter_maps.push((conv_index, h));
                    }
                    let h = run_unit(tape, h, &b.conv2, &mut params, &mut observed)?;
                    conv_index += 2;
                    let shortcut = match &b.projection {
                        Some(p) => {
                            conv_index += 1;
                            run_unit(tape, x, p, &mut params, &mut observed)?
                        }
                        None => x,
                    };
                    let y = tape.add(h, shortcut)?;
                    let y = tape.relu(y);
                    block_outputs.push(y);
                    y
                }
                LayerNode::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerNode::Dense(d) => {
                    let w = tape.param(&d.weight);
                    let b = tape.param(&d.bias);
                    params.extend([w, b]);
                    let flat = if tape.shape(x).len() == 2 {
                        x
                    } else {
                        tape.flatten(x)?
                    };
                    tape.dense(flat, w, b)?
                }
            };
        }
        Ok(ForwardPass {
            logits: x,
            params,
            filter_maps,
            block_outputs,
            observed,
        })
    }

    /// Pure forward with running batchnorm statistics.
    pub fn forward_eval(&self, tape: &mut Tape, input: Var) -> Result<ForwardPass> {
        self.forward_impl(tape, input, Mode::Eval)
    }

    /// Forward with batch statistics; folds them into the running state.
    pub fn forward_train(&mut self, tape: &mut Tape, input: Var) -> Result<ForwardPass> {
        let pass = self.forward_impl(tape, input, Mode::Train)?;
        let momentum = self.bn_config.momentum;
        for (state, obs) in self.bn_states_mut().into_iter().zip(&pass.observed) {
            if let Some(obs) = obs {
                update_running_stats(state, obs, momentum);
            }
        }
        Ok(pass)
    }

    pub fn forward(&mut self, tape: &mut Tape, input: Var, mode: Mode) -> Result<ForwardPass> {
        match mode {
            Mode::Train => self.forward_train(tape, input),
            Mode::Eval => self.forward_eval(tape, input),
        }
    }

    /// Eval-mode logits `[N, num_classes]` for raw images.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let pass = self.forward_eval(&mut tape, x)?;
        Ok(tape.value(pass.logits).clone())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(images)?.argmax_rows())
    }

    /// Adds tape gradients of the recorded parameter leaves into each
    /// parameter's grad slot.
    pub fn accumulate_grads(&mut self, tape: &Tape, pass: &ForwardPass) -> Result<()> {
        for ((_, p), v) in self.params_mut().into_iter().zip(&pass.params) {
            if let Some(g) = tape.grad(*v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Copies the value of every surviving parameter (and batchnorm state)
    /// from `source`, matched through origin bookkeeping. `source` must
    /// contain every origin this network still has.
    pub fn inherit_from(&mut self, source: &Network) -> Result<()> {
        if source.arch.kind != self.arch.kind || source.nodes.len() < self.nodes.len() {
            return Err(invalid(
                "inherit_from",
                "source is not an ancestor of this network",
            ));
        }
        let src_blocks: Vec<&ResidualBlock> = source.blocks();
        let src_other: Vec<&LayerNode> = source
            .nodes
            .iter()
            .filter(|n| !matches!(n, LayerNode::Residual(_)))
            .collect();
        let mut other_i = 0;
        for node in &mut self.nodes {
            match node {
                LayerNode::Residual(b) => {
                    let src = src_blocks
                        .iter()
                        .find(|s| s.origin == b.origin)
                        .ok_or_else(|| {
                            invalid(
                                "inherit_from",
                                format!("source lacks block origin {}", b.origin),
                            )
                        })?;
                    gather_unit(&mut b.conv1, &src.conv1)?;
                    gather_unit(&mut b.conv2, &src.conv2)?;
                    match (&mut b.projection, &src.projection) {
                        (Some(p), Some(sp)) => gather_unit(p, sp)?,
                        (None, None) => {}
                        _ => return Err(invalid("inherit_from", "projection layout differs")),
                    }
                }
                other => {
                    let src = src_other
                        .get(other_i)
                        .ok_or_else(|| invalid("inherit_from", "node layout differs"))?;
                    other_i += 1;
                    match (other, src) {
                        (LayerNode::ConvBnRelu(u), LayerNode::ConvBnRelu(s)) => gather_unit(u, s)?,
                        (LayerNode::Dense(d), LayerNode::Dense(s)) => {
                            let rows = positions(&d.in_origin, &s.in_origin)?;
                            d.weight = s.weight.select(0, &rows)?;
                            d.bias = s.bias.clone();
                        }
                        (LayerNode::MaxPool { .. }, LayerNode::MaxPool { .. })
                        | (LayerNode::GlobalAvgPool, LayerNode::GlobalAvgPool) => {}
                        _ => return Err(invalid("inherit_from", "node kinds differ")),
                    }
                }
            }
        }
        self.validate()
    }
}

fn positions(wanted: &[usize], available: &[usize]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|o| {
            available.iter().position(|a| a == o).ok_or_else(|| {
                invalid(
                    "inherit_from",
                    format!("origin channel {o} missing in source"),
                )
            })
        })
        .collect()
}

fn gather_unit(dst: &mut ConvUnit, src: &ConvUnit) -> Result<()> {
    let outs = positions(&dst.conv.out_origin, &src.conv.out_origin)?;
    let ins = positions(&dst.conv.in_origin, &src.conv.in_origin)?;
    dst.conv.weight = src.conv.weight.select(0, &outs)?.select(1, &ins)?;
    dst.conv.bias = src.conv.bias.select(0, &outs)?;
    dst.bn.gamma = src.bn.gamma.select(0, &outs)?;
    dst.bn.beta = src.bn.beta.select(0, &outs)?;
    dst.bn.state = BatchNormState {
        running_mean: outs.iter().map(|&i| src.bn.state.running_mean[i]).collect(),
        running_var: outs.iter().map(|&i| src.bn.state.running_var[i]).collect(),
        initialized: src.bn.state.initialized,
    };
    Ok(())
}
