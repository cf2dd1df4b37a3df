//! Layer graphs for small VGG-style and residual CNNs, gate-site
//! annotation, and gated forward/backward execution.
//!
//! Gate placement follows two rules. Every activation tensor that feeds a
//! convolution or dense layer gets exactly one gate group, except the raw
//! network input and the final logits. Around a residual merge, all
//! tensors whose channel axes are welded together by the add (both merge
//! inputs, and transitively everything an identity shortcut connects)
//! share a single group, so the same channels are dropped on every path
//! and physical pruning stays shape-consistent.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ActionSample, AgentBank};
use crate::error::{Error, Result};
use crate::ops::{self, BnCache, BnStats, Mode};
use crate::tensor::{ParamState, Tensor};

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

fn fresh_token() -> u64 {
    NEXT_TOKEN.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Input,
    Conv {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense,
    Add,
    Output,
}

impl LayerKind {
    pub fn is_conv_or_dense(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense)
    }

    /// Ops whose output channel axis is the same axis as their input's.
    fn is_channelwise(&self) -> bool {
        matches!(
            self,
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::MaxPool | LayerKind::GlobalAvgPool
        )
    }
}

/// Indices into [`ModelParams`]. Convolution and dense layers use
/// weight/bias; batchnorm uses weight for gamma, bias for beta, plus a
/// running-statistics slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRef {
    pub weight: usize,
    pub bias: usize,
    pub stats: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: Option<ParamRef>,
    pub predecessors: Vec<usize>,
}

/// One gate group: a channel count and the ids of every node whose output
/// activation the group's mask multiplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateGroup {
    pub id: usize,
    pub channels: usize,
    pub sites: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<LayerNode>,
    pub gate_groups: Vec<GateGroup>,
    pub input_shape: (usize, usize, usize),
    pub class_count: usize,
    #[serde(skip, default = "fresh_token")]
    token: u64,
}

impl PartialEq for GraphSpec {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.gate_groups == other.gate_groups
            && self.input_shape == other.input_shape
            && self.class_count == other.class_count
    }
}

impl GraphSpec {
    pub(crate) fn from_parts(
        nodes: Vec<LayerNode>,
        gate_groups: Vec<GateGroup>,
        input_shape: (usize, usize, usize),
        class_count: usize,
    ) -> Self {
        GraphSpec {
            nodes,
            gate_groups,
            input_shape,
            class_count,
            token: fresh_token(),
        }
    }

    pub fn token(&self) -> u64 {
        self.token
    }

    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.nodes.len()];
        for node in &self.nodes {
            for &p in &node.predecessors {
                succ[p].push(node.id);
            }
        }
        succ
    }

    /// Gate-group index (into `gate_groups`) per node, for nodes that are
    /// mask sites.
    pub fn site_to_group(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.nodes.len()];
        for (gi, group) in self.gate_groups.iter().enumerate() {
            for &site in &group.sites {
                map[site] = Some(gi);
            }
        }
        map
    }

    /// Structural validation: topology, channel bookkeeping, gate groups.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidGraph {
                reason: "no nodes".into(),
            });
        }
        let n_input = self
            .nodes
            .iter()
            .filter(|n| n.kind == LayerKind::Input)
            .count();
        let n_output = self
            .nodes
            .iter()
            .filter(|n| n.kind == LayerKind::Output)
            .count();
        if n_input != 1 || n_output != 1 {
            return Err(Error::InvalidGraph {
                reason: format!("expected exactly one input and one output node, got {n_input}/{n_output}"),
            });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::InvalidGraph {
                    reason: format!("node {i} carries id {}", node.id),
                });
            }
            // topological order: every edge points forward
            for &p in &node.predecessors {
                if p >= i {
                    return Err(Error::InvalidGraph {
                        reason: format!("node {i} depends on later node {p}"),
                    });
                }
            }
            match node.kind {
                LayerKind::Input => {
                    if !node.predecessors.is_empty() {
                        return Err(Error::InvalidGraph {
                            reason: "input node has predecessors".into(),
                        });
                    }
                }
                LayerKind::Add => {
                    if node.predecessors.len() != 2 {
                        return Err(Error::InvalidGraph {
                            reason: format!("add node {i} needs two predecessors"),
                        });
                    }
                    let a = self.nodes[node.predecessors[0]].out_channels;
                    let b = self.nodes[node.predecessors[1]].out_channels;
                    if a != b {
                        return Err(Error::InvalidGraph {
                            reason: format!("add node {i} merges unequal channel counts {a} and {b}"),
                        });
                    }
                }
                _ => {
                    if node.predecessors.len() != 1 {
                        return Err(Error::InvalidGraph {
                            reason: format!("node {i} needs exactly one predecessor"),
                        });
                    }
                }
            }
            if node.kind.is_channelwise() || node.kind == LayerKind::Add {
                let pin = self.nodes[node.predecessors[0]].out_channels;
                if node.in_channels != pin || node.out_channels != pin {
                    return Err(Error::InvalidGraph {
                        reason: format!("node {i} changes channels {pin} -> {}", node.out_channels),
                    });
                }
            }
            if node.kind.is_conv_or_dense() {
                let pin = self.nodes[node.predecessors[0]].out_channels;
                if node.in_channels != pin {
                    return Err(Error::InvalidGraph {
                        reason: format!(
                            "node {i} expects {} input channels but its predecessor provides {pin}",
                            node.in_channels
                        ),
                    });
                }
            }
        }
        // gate groups: equal widths, unique sites, logits and input never gated
        let spaces = self.channel_spaces();
        let output_node = self.nodes.len() - 1;
        let mut seen_site = vec![false; self.nodes.len()];
        for (gi, group) in self.gate_groups.iter().enumerate() {
            if group.id != gi {
                return Err(Error::InvalidGraph {
                    reason: format!("gate group {gi} carries id {}", group.id),
                });
            }
            if group.sites.is_empty() {
                return Err(Error::InvalidGraph {
                    reason: format!("gate group {gi} has no sites"),
                });
            }
            let space = spaces.space_of[group.sites[0]];
            for &site in &group.sites {
                if site >= self.nodes.len() {
                    return Err(Error::InvalidGraph {
                        reason: format!("gate group {gi} references missing node {site}"),
                    });
                }
                if seen_site[site] {
                    return Err(Error::InvalidGraph {
                        reason: format!("node {site} is masked by two gate groups"),
                    });
                }
                seen_site[site] = true;
                if self.nodes[site].out_channels != group.channels {
                    return Err(Error::InvalidGraph {
                        reason: format!(
                            "gate group {gi} width {} does not match node {site} width {}",
                            group.channels, self.nodes[site].out_channels
                        ),
                    });
                }
                if spaces.space_of[site] != space {
                    return Err(Error::InvalidGraph {
                        reason: format!("gate group {gi} spans unrelated channel spaces"),
                    });
                }
            }
            if space == spaces.space_of[output_node] {
                return Err(Error::InvalidGraph {
                    reason: "logits must not be gated".into(),
                });
            }
            if spaces.members[space].contains(&0) && self.nodes[0].kind == LayerKind::Input {
                return Err(Error::InvalidGraph {
                    reason: "raw input must not be gated".into(),
                });
            }
        }
        Ok(())
    }

    /// Partition node outputs into channel spaces: maximal sets of tensors
    /// whose channel axes are welded together by channelwise ops and
    /// residual merges. Convolution and dense outputs open new spaces.
    pub fn channel_spaces(&self) -> ChannelSpaces {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for node in &self.nodes {
            let unite = node.kind.is_channelwise()
                || node.kind == LayerKind::Add
                || node.kind == LayerKind::Output;
            if unite {
                for &p in &node.predecessors {
                    let a = find(&mut parent, node.id);
                    let b = find(&mut parent, p);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut space_of = vec![0usize; n];
        let mut order: Vec<usize> = Vec::new();
        for i in 0..n {
            let root = find(&mut parent, i);
            if root == i {
                order.push(i);
            }
        }
        let mut members = vec![Vec::new(); order.len()];
        for i in 0..n {
            let root = find(&mut parent, i);
            let sid = order.binary_search(&root).expect("root indexed");
            space_of[i] = sid;
            members[sid].push(i);
        }
        ChannelSpaces { space_of, members }
    }
}

/// Output of [`GraphSpec::channel_spaces`]. Space ids are ordered by their
/// smallest member node id, so they are stable for a given graph.
#[derive(Debug, Clone)]
pub struct ChannelSpaces {
    pub space_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

struct GraphAssembler {
    nodes: Vec<LayerNode>,
    next_param: usize,
    next_stats: usize,
}

impl GraphAssembler {
    fn new() -> Self {
        GraphAssembler {
            nodes: Vec::new(),
            next_param: 0,
            next_stats: 0,
        }
    }

    fn push(&mut self, kind: LayerKind, in_ch: usize, out_ch: usize, preds: Vec<usize>) -> usize {
        let params = match kind {
            LayerKind::Conv { .. } | LayerKind::Dense => {
                let r = ParamRef {
                    weight: self.next_param,
                    bias: self.next_param + 1,
                    stats: None,
                };
                self.next_param += 2;
                Some(r)
            }
            LayerKind::BatchNorm => {
                let r = ParamRef {
                    weight: self.next_param,
                    bias: self.next_param + 1,
                    stats: Some(self.next_stats),
                };
                self.next_param += 2;
                self.next_stats += 1;
                Some(r)
            }
            _ => None,
        };
        let id = self.nodes.len();
        self.nodes.push(LayerNode {
            id,
            kind,
            in_channels: in_ch,
            out_channels: out_ch,
            params,
            predecessors: preds,
        });
        id
    }

    fn conv_bn_relu(&mut self, pred: usize, in_ch: usize, out_ch: usize) -> usize {
        let conv = self.push(
            LayerKind::Conv {
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            in_ch,
            out_ch,
            vec![pred],
        );
        let bn = self.push(LayerKind::BatchNorm, out_ch, out_ch, vec![conv]);
        self.push(LayerKind::Relu, out_ch, out_ch, vec![bn])
    }

    fn finish(
        self,
        input_shape: (usize, usize, usize),
        class_count: usize,
    ) -> Result<GraphSpec> {
        let graph = GraphSpec {
            nodes: self.nodes,
            gate_groups: Vec::new(),
            input_shape,
            class_count,
            token: fresh_token(),
        };
        graph.validate()?;
        Ok(graph)
    }
}

/// Split a flat width list into pooling stages: a stage ends when the
/// width changes or after three convolutions, which reproduces the usual
/// 2-2-3-3-3 grouping for the full 13-layer plan.
fn split_stages(plan: &[usize]) -> Vec<Vec<usize>> {
    let mut stages: Vec<Vec<usize>> = Vec::new();
    for &w in plan {
        match stages.last_mut() {
            Some(stage) if stage[0] == w && stage.len() < 3 => stage.push(w),
            _ => stages.push(vec![w]),
        }
    }
    stages
}

/// VGG-style chain: stacks of 3x3 conv + batchnorm + ReLU with a 2x2 max
/// pool after each stage, then global average pooling into a two-layer
/// dense head.
pub fn build_vgg_tiny(
    channel_plan: &[usize],
    fc_width: usize,
    class_count: usize,
    input_shape: (usize, usize, usize),
) -> Result<GraphSpec> {
    if channel_plan.is_empty() {
        return Err(Error::EmptyInput {
            what: "channel plan",
        });
    }
    if channel_plan.contains(&0) || fc_width == 0 || class_count == 0 {
        return Err(Error::Config {
            reason: "channel widths, fc width and class count must be positive".into(),
        });
    }
    let stages = split_stages(channel_plan);
    let pools = stages.len() as u32;
    let (c, h, w) = input_shape;
    if c == 0 || h % (1 << pools) != 0 || w % (1 << pools) != 0 {
        return Err(Error::Config {
            reason: format!(
                "input {h}x{w} does not support {pools} pooling stages (must be divisible by {})",
                1 << pools
            ),
        });
    }

    let mut asm = GraphAssembler::new();
    let mut cursor = asm.push(LayerKind::Input, c, c, vec![]);
    let mut in_ch = c;
    for stage in &stages {
        for &width in stage {
            cursor = asm.conv_bn_relu(cursor, in_ch, width);
            in_ch = width;
        }
        cursor = asm.push(LayerKind::MaxPool, in_ch, in_ch, vec![cursor]);
    }
    cursor = asm.push(LayerKind::GlobalAvgPool, in_ch, in_ch, vec![cursor]);
    cursor = asm.push(LayerKind::Dense, in_ch, fc_width, vec![cursor]);
    cursor = asm.push(LayerKind::Relu, fc_width, fc_width, vec![cursor]);
    cursor = asm.push(LayerKind::Dense, fc_width, class_count, vec![cursor]);
    asm.push(LayerKind::Output, class_count, class_count, vec![cursor]);
    asm.finish(input_shape, class_count)
}

/// The conv widths of the 13-layer chain used for the accounting checks.
pub const VGG16_PLAN: [usize; 13] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];

/// Full-size chain on 3x32x32 input with a 512-wide head; after five pools
/// the spatial extent is 1x1, so global average pooling is a plain flatten.
pub fn build_vgg16_cifar() -> GraphSpec {
    build_vgg_tiny(&VGG16_PLAN, 512, 10, (3, 32, 32)).expect("canonical build is valid")
}

/// Residual chain: a conv-bn-relu stem, one basic block per plan entry
/// (conv-bn-relu-conv-bn, shortcut, add, relu), then global average
/// pooling into the classifier. A width change inserts a 1x1 projection
/// shortcut; equal widths use an identity shortcut.
pub fn build_resnet_tiny(
    stage_plan: &[usize],
    class_count: usize,
    input_shape: (usize, usize, usize),
) -> Result<GraphSpec> {
    if stage_plan.is_empty() {
        return Err(Error::EmptyInput { what: "stage plan" });
    }
    if stage_plan.contains(&0) || class_count == 0 {
        return Err(Error::Config {
            reason: "block widths and class count must be positive".into(),
        });
    }
    let (c, _, _) = input_shape;
    let mut asm = GraphAssembler::new();
    let input = asm.push(LayerKind::Input, c, c, vec![]);
    let mut cursor = asm.conv_bn_relu(input, c, stage_plan[0]);
    let mut in_ch = stage_plan[0];
    for &width in stage_plan {
        let block_in = cursor;
        let mid = asm.conv_bn_relu(block_in, in_ch, width);
        let conv2 = asm.push(
            LayerKind::Conv {
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            width,
            width,
            vec![mid],
        );
        let bn2 = asm.push(LayerKind::BatchNorm, width, width, vec![conv2]);
        let shortcut = if in_ch == width {
            block_in
        } else {
            let proj = asm.push(
                LayerKind::Conv {
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                in_ch,
                width,
                vec![block_in],
            );
            asm.push(LayerKind::BatchNorm, width, width, vec![proj])
        };
        let add = asm.push(LayerKind::Add, width, width, vec![bn2, shortcut]);
        cursor = asm.push(LayerKind::Relu, width, width, vec![add]);
        in_ch = width;
    }
    cursor = asm.push(LayerKind::GlobalAvgPool, in_ch, in_ch, vec![cursor]);
    cursor = asm.push(LayerKind::Dense, in_ch, class_count, vec![cursor]);
    asm.push(LayerKind::Output, class_count, class_count, vec![cursor]);
    asm.finish(input_shape, class_count)
}

// ---------------------------------------------------------------------------
// Gate attachment
// ---------------------------------------------------------------------------

/// Annotate every prunable channel space with a gate group and create the
/// matching agent bank, one weight per channel, all at the init value.
///
/// A space is gated iff it feeds at least one convolution or dense layer
/// and does not contain the raw input; the logits feed nothing, so they
/// stay ungated. Mask sites are the member nodes whose outputs flow into
/// a convolution, dense layer, or residual merge.
pub fn attach_gates(graph: &GraphSpec) -> Result<(GraphSpec, AgentBank)> {
    graph.validate()?;
    if !graph.gate_groups.is_empty() {
        return Err(Error::InvalidGraph {
            reason: "graph already carries gate groups".into(),
        });
    }
    let spaces = graph.channel_spaces();
    let succ = graph.successors();
    let mut gate_groups = Vec::new();
    let mut bank_spec = Vec::new();
    for (sid, members) in spaces.members.iter().enumerate() {
        let has_input = members
            .iter()
            .any(|&m| graph.nodes[m].kind == LayerKind::Input);
        if has_input {
            continue;
        }
        let feeds_layer = members.iter().any(|&m| {
            succ[m]
                .iter()
                .any(|&s| graph.nodes[s].kind.is_conv_or_dense())
        });
        if !feeds_layer {
            continue;
        }
        let channels = graph.nodes[members[0]].out_channels;
        debug_assert!(members
            .iter()
            .all(|&m| graph.nodes[m].out_channels == channels));
        let mut sites: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&m| {
                succ[m].iter().any(|&s| {
                    graph.nodes[s].kind.is_conv_or_dense() || graph.nodes[s].kind == LayerKind::Add
                })
            })
            .collect();
        sites.sort_unstable();
        let id = gate_groups.len();
        gate_groups.push(GateGroup {
            id,
            channels,
            sites,
        });
        bank_spec.push((id, channels));
        let _ = sid;
    }
    let gated = GraphSpec {
        nodes: graph.nodes.clone(),
        gate_groups,
        input_shape: graph.input_shape,
        class_count: graph.class_count,
        token: fresh_token(),
    };
    gated.validate()?;
    Ok((gated.clone(), AgentBank::new(&bank_spec)))
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// All mutable numeric state of a model: trainable parameters plus
/// batchnorm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub states: Vec<ParamState>,
    pub bn: Vec<BnStats>,
}

impl ModelParams {
    pub fn zero_gradients(&mut self) {
        for s in &mut self.states {
            s.zero_gradient();
        }
    }
}

fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Box-Muller on two open-interval uniforms
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let (a, b) = normal_pair(rng);
        data.push((a * std) as f32);
        if data.len() < n {
            data.push((b * std) as f32);
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Fresh parameters for a graph: He-normal conv/dense weights, zero
/// biases, unit gamma, zero beta, running stats at mean 0 / variance 1.
pub fn init_params(graph: &GraphSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_states = graph
        .nodes
        .iter()
        .filter_map(|n| n.params)
        .map(|p| p.weight.max(p.bias) + 1)
        .max()
        .unwrap_or(0);
    let n_stats = graph
        .nodes
        .iter()
        .filter_map(|n| n.params.and_then(|p| p.stats))
        .map(|s| s + 1)
        .max()
        .unwrap_or(0);
    let mut states = vec![ParamState::new(Tensor::zeros(&[0])); n_states];
    let mut bn = vec![BnStats::new(0); n_stats];
    for node in &graph.nodes {
        let Some(pref) = node.params else { continue };
        match node.kind {
            LayerKind::Conv { kernel, .. } => {
                let fan_in = node.in_channels * kernel * kernel;
                states[pref.weight] = ParamState::new(he_normal(
                    &mut rng,
                    &[node.out_channels, node.in_channels, kernel, kernel],
                    fan_in,
                ));
                states[pref.bias] = ParamState::new(Tensor::zeros(&[node.out_channels]));
            }
            LayerKind::Dense => {
                states[pref.weight] = ParamState::new(he_normal(
                    &mut rng,
                    &[node.out_channels, node.in_channels],
                    node.in_channels,
                ));
                states[pref.bias] = ParamState::new(Tensor::zeros(&[node.out_channels]));
            }
            LayerKind::BatchNorm => {
                states[pref.weight] = ParamState::new(Tensor::filled(&[node.out_channels], 1.0));
                states[pref.bias] = ParamState::new(Tensor::zeros(&[node.out_channels]));
                bn[pref.stats.unwrap()] = BnStats::new(node.out_channels);
            }
            _ => {}
        }
    }
    ModelParams { states, bn }
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// Binary channel masks for every gate group, either one shared row or one
/// row per batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub planes: Vec<MaskPlane>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlane {
    pub group_id: usize,
    pub rows: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl MaskSet {
    pub fn from_actions(sample: &ActionSample) -> Self {
        MaskSet {
            planes: sample
                .groups
                .iter()
                .map(|g| MaskPlane {
                    group_id: g.group_id,
                    rows: g.rows(),
                    channels: g.channels(),
                    data: g.actions.iter().map(|&a| f32::from(a)).collect(),
                })
                .collect(),
        }
    }

    /// One shared row per group from boolean keep flags, ordered like the
    /// graph's gate groups.
    pub fn from_kept(kept: &[Vec<bool>]) -> Self {
        MaskSet {
            planes: kept
                .iter()
                .enumerate()
                .map(|(id, flags)| MaskPlane {
                    group_id: id,
                    rows: 1,
                    channels: flags.len(),
                    data: flags.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
                })
                .collect(),
        }
    }

    pub fn all_ones(graph: &GraphSpec) -> Self {
        MaskSet {
            planes: graph
                .gate_groups
                .iter()
                .map(|g| MaskPlane {
                    group_id: g.id,
                    rows: 1,
                    channels: g.channels,
                    data: vec![1.0; g.channels],
                })
                .collect(),
        }
    }

    fn plane_for(&self, group_id: usize) -> Option<&MaskPlane> {
        self.planes.iter().find(|p| p.group_id == group_id)
    }

    /// Mean kept fraction across all mask entries.
    pub fn kept_fraction(&self) -> f64 {
        let total: usize = self.planes.iter().map(|p| p.data.len()).sum();
        if total == 0 {
            return 1.0;
        }
        let kept: f64 = self
            .planes
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|&v| f64::from(v))
            .sum();
        kept / total as f64
    }

    fn validate(&self, graph: &GraphSpec, batch: usize) -> Result<()> {
        for group in &graph.gate_groups {
            let plane = self.plane_for(group.id).ok_or_else(|| Error::MaskMismatch {
                reason: format!("no mask for gate group {}", group.id),
            })?;
            if plane.channels != group.channels {
                return Err(Error::MaskMismatch {
                    reason: format!(
                        "gate group {} has {} channels but mask provides {}",
                        group.id, group.channels, plane.channels
                    ),
                });
            }
            if plane.rows != 1 && plane.rows != batch {
                return Err(Error::MaskMismatch {
                    reason: format!(
                        "gate group {} mask has {} rows for batch size {batch}",
                        group.id, plane.rows
                    ),
                });
            }
            if plane.data.len() != plane.rows * plane.channels {
                return Err(Error::MaskMismatch {
                    reason: format!("gate group {} mask storage is ragged", group.id),
                });
            }
        }
        Ok(())
    }
}

/// Multiply a (N,C,...) tensor by a per-channel mask in place.
fn apply_mask(tensor: &mut Tensor, plane: &MaskPlane) {
    let n = tensor.dim(0);
    let c = tensor.dim(1);
    let spatial: usize = tensor.shape.iter().skip(2).product();
    debug_assert_eq!(c, plane.channels);
    for b in 0..n {
        let row = if plane.rows == 1 { 0 } else { b };
        for ch in 0..c {
            let m = plane.data[row * c + ch];
            if m == 1.0 {
                continue;
            }
            let start = (b * c + ch) * spatial;
            for v in &mut tensor.data[start..start + spatial] {
                *v *= m;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum NodeExtra {
    None,
    Pool { argmax: Vec<u32>, in_shape: Vec<usize> },
    Bn(BnCache),
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug)]
pub struct Cache {
    outputs: Vec<Tensor>,
    extras: Vec<NodeExtra>,
    masks: Option<MaskSet>,
    mode: Mode,
    token: u64,
}

impl Cache {
    pub fn output(&self, node: usize) -> &Tensor {
        &self.outputs[node]
    }
}

/// Run the graph on a batch. Gated activations are multiplied channel-wise
/// by their group's mask before flowing onward; without masks this is the
/// plain network.
pub fn forward(
    graph: &GraphSpec,
    model: &mut ModelParams,
    batch: &Tensor,
    masks: Option<&MaskSet>,
    mode: Mode,
) -> Result<(Tensor, Cache)> {
    if batch.shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "forward",
            dimension: "batch rank",
            expected: 4,
            actual: batch.shape.len(),
        });
    }
    let (c, h, w) = graph.input_shape;
    if batch.shape[1] != c || batch.shape[2] != h || batch.shape[3] != w {
        return Err(Error::ShapeMismatch {
            op: "forward",
            dimension: "input channels/extent",
            expected: c * h * w,
            actual: batch.shape[1] * batch.shape[2] * batch.shape[3],
        });
    }
    let n = batch.shape[0];
    if let Some(m) = masks {
        m.validate(graph, n)?;
    }
    let site_group = graph.site_to_group();

    let mut outputs: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    let mut extras: Vec<NodeExtra> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let (mut out, extra) = match node.kind {
            LayerKind::Input => (batch.clone(), NodeExtra::None),
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let pref = node.params.expect("conv has params");
                let input = &outputs[node.predecessors[0]];
                let out = ops::conv2d_forward(
                    input,
                    &model.states[pref.weight].value,
                    &model.states[pref.bias].value,
                    stride,
                    padding,
                )?;
                (out, NodeExtra::None)
            }
            LayerKind::Dense => {
                let pref = node.params.expect("dense has params");
                let input = &outputs[node.predecessors[0]];
                let out = ops::dense_forward(
                    input,
                    &model.states[pref.weight].value,
                    &model.states[pref.bias].value,
                )?;
                (out, NodeExtra::None)
            }
            LayerKind::BatchNorm => {
                let pref = node.params.expect("bn has params");
                let input = &outputs[node.predecessors[0]];
                let (out, cache) = ops::batchnorm_forward(
                    input,
                    &model.states[pref.weight].value,
                    &model.states[pref.bias].value,
                    &mut model.bn[pref.stats.unwrap()],
                    mode,
                )?;
                (out, NodeExtra::Bn(cache))
            }
            LayerKind::Relu => (
                ops::relu_forward(&outputs[node.predecessors[0]]),
                NodeExtra::None,
            ),
            LayerKind::MaxPool => {
                let input = &outputs[node.predecessors[0]];
                let in_shape = input.shape.clone();
                let (out, argmax) = ops::maxpool2_forward(input)?;
                (out, NodeExtra::Pool { argmax, in_shape })
            }
            LayerKind::GlobalAvgPool => (
                ops::global_avg_pool_forward(&outputs[node.predecessors[0]])?,
                NodeExtra::None,
            ),
            LayerKind::Add => {
                let a = &outputs[node.predecessors[0]];
                let b = &outputs[node.predecessors[1]];
                if a.shape != b.shape {
                    return Err(Error::ShapeMismatch {
                        op: "add",
                        dimension: "merge extent",
                        expected: a.len(),
                        actual: b.len(),
                    });
                }
                let data = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| x + y)
                    .collect();
                (
                    Tensor {
                        shape: a.shape.clone(),
                        data,
                    },
                    NodeExtra::None,
                )
            }
            LayerKind::Output => (outputs[node.predecessors[0]].clone(), NodeExtra::None),
        };
        if let (Some(ms), Some(gi)) = (masks, site_group[node.id]) {
            let plane = ms.plane_for(graph.gate_groups[gi].id).expect("validated");
            apply_mask(&mut out, plane);
        }
        outputs.push(out);
        extras.push(extra);
    }
    let logits = outputs[graph.nodes.len() - 1].clone();
    Ok((
        logits,
        Cache {
            outputs,
            extras,
            masks: masks.cloned(),
            mode,
            token: graph.token,
        },
    ))
}

/// Backpropagate a logits gradient, accumulating into the network
/// parameter gradients. Gradients flow through the masks, so dropped
/// channels contribute nothing upstream. Agent weights are untouched.
pub fn backward(
    graph: &GraphSpec,
    model: &mut ModelParams,
    cache: &Cache,
    dlogits: &Tensor,
) -> Result<()> {
    if cache.token != graph.token {
        return Err(Error::StaleCache {
            reason: "cache was produced by a different graph".into(),
        });
    }
    if cache.mode != Mode::Train {
        return Err(Error::StaleCache {
            reason: "backward needs a cache from a train-mode forward".into(),
        });
    }
    if cache.outputs.len() != graph.nodes.len() {
        return Err(Error::StaleCache {
            reason: "cache does not cover this graph".into(),
        });
    }
    let site_group = graph.site_to_group();
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    grads[graph.nodes.len() - 1] = Some(dlogits.clone());

    for node in graph.nodes.iter().rev() {
        let Some(mut g) = grads[node.id].take() else {
            continue;
        };
        // the mask multiplication is the last step of this node's forward
        if let (Some(ms), Some(gi)) = (cache.masks.as_ref(), site_group[node.id]) {
            let plane = ms
                .plane_for(graph.gate_groups[gi].id)
                .expect("validated at forward");
            apply_mask(&mut g, plane);
        }
        match node.kind {
            LayerKind::Input => {}
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let pref = node.params.expect("conv has params");
                let input = &cache.outputs[node.predecessors[0]];
                let (dinput, dw, db) = ops::conv2d_backward(
                    input,
                    &model.states[pref.weight].value,
                    &g,
                    stride,
                    padding,
                )?;
                accumulate(&mut model.states[pref.weight].gradient, &dw);
                accumulate(&mut model.states[pref.bias].gradient, &db);
                push_grad(&mut grads, node.predecessors[0], dinput);
            }
            LayerKind::Dense => {
                let pref = node.params.expect("dense has params");
                let input = &cache.outputs[node.predecessors[0]];
                let (dinput, dw, db) =
                    ops::dense_backward(input, &model.states[pref.weight].value, &g)?;
                accumulate(&mut model.states[pref.weight].gradient, &dw);
                accumulate(&mut model.states[pref.bias].gradient, &db);
                push_grad(&mut grads, node.predecessors[0], dinput);
            }
            LayerKind::BatchNorm => {
                let pref = node.params.expect("bn has params");
                let NodeExtra::Bn(bn_cache) = &cache.extras[node.id] else {
                    return Err(Error::StaleCache {
                        reason: "missing batchnorm cache".into(),
                    });
                };
                let (dinput, dgamma, dbeta) =
                    ops::batchnorm_backward(bn_cache, &model.states[pref.weight].value, &g)?;
                accumulate(&mut model.states[pref.weight].gradient, &dgamma);
                accumulate(&mut model.states[pref.bias].gradient, &dbeta);
                push_grad(&mut grads, node.predecessors[0], dinput);
            }
            LayerKind::Relu => {
                let input = &cache.outputs[node.predecessors[0]];
                let dinput = ops::relu_backward(input, &g);
                push_grad(&mut grads, node.predecessors[0], dinput);
            }
            LayerKind::MaxPool => {
                let NodeExtra::Pool { argmax, in_shape } = &cache.extras[node.id] else {
                    return Err(Error::StaleCache {
                        reason: "missing pool cache".into(),
                    });
                };
                let dinput = ops::maxpool2_backward(in_shape, argmax, &g);
                push_grad(&mut grads, node.predecessors[0], dinput);
            }
            LayerKind::GlobalAvgPool => {
                let in_shape = cache.outputs[node.predecessors[0]].shape.clone();
                let dinput = ops::global_avg_pool_backward(&in_shape, &g);
                push_grad(&mut grads, node.predecessors[0], dinput);
            }
            LayerKind::Add => {
                push_grad(&mut grads, node.predecessors[0], g.clone());
                push_grad(&mut grads, node.predecessors[1], g);
            }
            LayerKind::Output => {
                push_grad(&mut grads, node.predecessors[0], g);
            }
        }
    }
    Ok(())
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape, src.shape);
    for (d, &s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

fn push_grad(grads: &mut [Option<Tensor>], node: usize, g: Tensor) {
    match &mut grads[node] {
        Some(existing) => accumulate(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise argmax; the first maximum wins ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    let n = logits.dim(0);
    (0..n)
        .map(|r| {
            let row = &logits.data[r * k..(r + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of correct argmax predictions over a labelled image tensor,
/// evaluated in inference mode in fixed-size chunks. Masks, when given,
/// must use a single shared row per group.
pub fn batched_accuracy(
    graph: &GraphSpec,
    model: &mut ModelParams,
    images: &Tensor,
    labels: &[usize],
    masks: Option<&MaskSet>,
    batch_size: usize,
) -> Result<f64> {
    let n = images.dim(0);
    if n == 0 {
        return Err(Error::EmptyInput { what: "dataset" });
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            dimension: "label count",
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(ms) = masks {
        if ms.planes.iter().any(|p| p.rows != 1) {
            return Err(Error::MaskMismatch {
                reason: "evaluation masks must use one shared row per group".into(),
            });
        }
    }
    let sample: usize = images.shape.iter().skip(1).product();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let batch = Tensor::from_vec(
            &[
                end - start,
                images.shape[1],
                images.shape[2],
                images.shape[3],
            ],
            images.data[start * sample..end * sample].to_vec(),
        )?;
        let (logits, _) = forward(graph, model, &batch, masks, Mode::Inference)?;
        for (pred, &label) in argmax_rows(&logits).iter().zip(&labels[start..end]) {
            if *pred == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// JSON export / import
// ---------------------------------------------------------------------------

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    version: u32,
    graph: GraphSpec,
}

pub fn graph_to_json(graph: &GraphSpec) -> Result<String> {
    serde_json::to_string_pretty(&GraphDoc {
        version: GRAPH_FORMAT_VERSION,
        graph: graph.clone(),
    })
    .map_err(|e| Error::Json {
        reason: e.to_string(),
    })
}

pub fn graph_from_json(text: &str) -> Result<GraphSpec> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| Error::Json {
        reason: e.to_string(),
    })?;
    if doc.version != GRAPH_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: GRAPH_FORMAT_VERSION,
            actual: doc.version,
        });
    }
    doc.graph.validate()?;
    Ok(doc.graph)
}

/// The versioned graph document as a JSON value, for embedding in reports.
pub fn graph_to_value(graph: &GraphSpec) -> Result<serde_json::Value> {
    serde_json::to_value(GraphDoc {
        version: GRAPH_FORMAT_VERSION,
        graph: graph.clone(),
    })
    .map_err(|e| Error::Json {
        reason: e.to_string(),
    })
}
