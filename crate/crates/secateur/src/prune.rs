//! Exact parameter/FLOPs accounting, physical channel removal with weight
//! transfer, compression reporting, and the channel-importance ablation.
//!
//! FLOPs convention: one multiply-accumulate counts as one FLOP, and only
//! convolution and dense layers count; batchnorm, activations and pooling
//! are excluded. Conventions in the wild differ by 2x, so this one is
//! pinned here and reproduced by the accounting tests. Parameter counts
//! include biases and batchnorm's gamma/beta.

use serde::{Deserialize, Serialize};

use crate::agent::AgentBank;
use crate::error::{Error, Result};
use crate::graph::{
    batched_accuracy, GateGroup, GraphSpec, LayerKind, MaskSet, ModelParams,
};
use crate::tensor::{ParamState, Tensor};

/// Per-node output spatial extents, propagated from the graph input.
fn spatial_map(graph: &GraphSpec) -> Vec<(usize, usize)> {
    let (_, h, w) = graph.input_shape;
    let mut dims = vec![(0usize, 0usize); graph.nodes.len()];
    for node in &graph.nodes {
        dims[node.id] = match node.kind {
            LayerKind::Input => (h, w),
            LayerKind::Conv {
                kernel,
                stride,
                padding,
            } => {
                let (ph, pw) = dims[node.predecessors[0]];
                (
                    (ph + 2 * padding - kernel) / stride + 1,
                    (pw + 2 * padding - kernel) / stride + 1,
                )
            }
            LayerKind::MaxPool => {
                let (ph, pw) = dims[node.predecessors[0]];
                (ph / 2, pw / 2)
            }
            LayerKind::GlobalAvgPool | LayerKind::Dense => (1, 1),
            _ => dims[node.predecessors[0]],
        };
    }
    dims
}

/// Channel count of every node's input/output under an optional override
/// of kept channels per gate group. `None` means the unpruned widths.
fn effective_widths(graph: &GraphSpec, group_kept: Option<&[usize]>) -> Vec<usize> {
    let spaces = graph.channel_spaces();
    let mut space_width: Vec<Option<usize>> = vec![None; spaces.members.len()];
    if let Some(kept) = group_kept {
        for (gi, group) in graph.gate_groups.iter().enumerate() {
            let sid = spaces.space_of[group.sites[0]];
            space_width[sid] = Some(kept[gi]);
        }
    }
    graph
        .nodes
        .iter()
        .map(|n| space_width[spaces.space_of[n.id]].unwrap_or(n.out_channels))
        .collect()
}

fn measure(graph: &GraphSpec, group_kept: Option<&[usize]>) -> (u64, u64) {
    let widths = effective_widths(graph, group_kept);
    let dims = spatial_map(graph);
    let mut params = 0u64;
    let mut flops = 0u64;
    for node in &graph.nodes {
        let out = widths[node.id] as u64;
        match node.kind {
            LayerKind::Conv { kernel, .. } => {
                let input = widths[node.predecessors[0]] as u64;
                let k2 = (kernel * kernel) as u64;
                params += k2 * input * out + out;
                let (ho, wo) = dims[node.id];
                flops += k2 * input * out * (ho as u64) * (wo as u64);
            }
            LayerKind::Dense => {
                let input = widths[node.predecessors[0]] as u64;
                params += input * out + out;
                flops += input * out;
            }
            LayerKind::BatchNorm => {
                params += 2 * out;
            }
            _ => {}
        }
    }
    (params, flops)
}

/// Exact parameter count: conv K^2*Cin*Cout + Cout, dense Nin*Nout + Nout,
/// batchnorm 2C.
pub fn count_params(graph: &GraphSpec) -> u64 {
    measure(graph, None).0
}

/// Exact multiply-accumulate count on the graph's input shape.
pub fn count_flops(graph: &GraphSpec) -> u64 {
    measure(graph, None).1
}

pub(crate) fn measure_with_kept(graph: &GraphSpec, group_kept: &[usize]) -> (u64, u64) {
    measure(graph, Some(group_kept))
}

// ---------------------------------------------------------------------------
// Physical pruning
// ---------------------------------------------------------------------------

/// Kept-channel index sets per gate group under a probability threshold.
/// A group whose channels all fall below the threshold keeps its single
/// highest-probability channel so no layer collapses to zero width.
pub fn kept_sets(bank: &AgentBank, threshold: f64) -> Vec<Vec<usize>> {
    bank.keep_probabilities()
        .iter()
        .map(|probs| {
            let kept: Vec<usize> = probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| p >= threshold)
                .map(|(j, _)| j)
                .collect();
            if kept.is_empty() {
                let best = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(j, _)| j)
                    .unwrap_or(0);
                vec![best]
            } else {
                kept
            }
        })
        .collect()
}

/// A physically compressed model: smaller graph, transferred weights, and
/// the agent bank restricted to the surviving channels.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub graph: GraphSpec,
    pub params: ModelParams,
    pub bank: AgentBank,
    pub kept: Vec<Vec<usize>>,
}

fn slice_rows(t: &Tensor, kept: &[usize]) -> Tensor {
    // keep rows of the leading axis
    let row: usize = t.shape.iter().skip(1).product();
    let mut data = Vec::with_capacity(kept.len() * row);
    for &r in kept {
        data.extend_from_slice(&t.data[r * row..(r + 1) * row]);
    }
    let mut shape = t.shape.clone();
    shape[0] = kept.len();
    Tensor { shape, data }
}

fn slice_axis1(t: &Tensor, kept: &[usize]) -> Tensor {
    // keep slices of the second axis (conv input channels / dense columns)
    let rows = t.shape[0];
    let cols = t.shape[1];
    let inner: usize = t.shape.iter().skip(2).product();
    let mut data = Vec::with_capacity(rows * kept.len() * inner);
    for r in 0..rows {
        for &c in kept {
            let start = (r * cols + c) * inner;
            data.extend_from_slice(&t.data[start..start + inner]);
        }
    }
    let mut shape = t.shape.clone();
    shape[1] = kept.len();
    Tensor { shape, data }
}

fn slice_param(p: &ParamState, f: impl Fn(&Tensor) -> Tensor) -> ParamState {
    ParamState {
        value: f(&p.value),
        gradient: f(&p.gradient),
        moment1: f(&p.moment1),
        moment2: f(&p.moment2),
        step: p.step,
    }
}

/// Remove every channel not listed in `kept` (one sorted index set per
/// gate group): producing filters, the consuming layers' input slices, and
/// the matching batchnorm entries all go together, identically across all
/// member nodes of a shared group. The original model is untouched.
pub fn prune_with_kept(
    graph: &GraphSpec,
    model: &ModelParams,
    bank: &AgentBank,
    kept: &[Vec<usize>],
) -> Result<PruneOutcome> {
    graph.validate()?;
    if kept.len() != graph.gate_groups.len() {
        return Err(Error::ShapeMismatch {
            op: "prune",
            dimension: "kept sets",
            expected: graph.gate_groups.len(),
            actual: kept.len(),
        });
    }
    for (group, k) in graph.gate_groups.iter().zip(kept) {
        if k.is_empty() || k.iter().any(|&c| c >= group.channels) {
            return Err(Error::IndexOutOfRange {
                what: "kept channel",
                value: k.iter().copied().max().unwrap_or(0),
                limit: group.channels,
            });
        }
    }
    let spaces = graph.channel_spaces();
    // kept indices per channel space; ungated spaces keep everything
    let mut space_kept: Vec<Option<&[usize]>> = vec![None; spaces.members.len()];
    for (gi, group) in graph.gate_groups.iter().enumerate() {
        space_kept[spaces.space_of[group.sites[0]]] = Some(&kept[gi]);
    }
    let full: Vec<Vec<usize>> = spaces
        .members
        .iter()
        .map(|m| (0..graph.nodes[m[0]].out_channels).collect())
        .collect();
    let kept_of = |node: usize| -> &[usize] {
        let sid = spaces.space_of[node];
        space_kept[sid].unwrap_or(&full[sid])
    };

    let mut nodes = Vec::with_capacity(graph.nodes.len());
    let mut states = model.states.clone();
    let mut bn = model.bn.clone();
    for node in &graph.nodes {
        let out_kept = kept_of(node.id);
        let in_kept = node
            .predecessors
            .first()
            .map(|&p| kept_of(p))
            .unwrap_or(out_kept);
        let mut new_node = node.clone();
        new_node.out_channels = out_kept.len();
        new_node.in_channels = match node.kind {
            LayerKind::Input => node.in_channels,
            _ => in_kept.len(),
        };
        if let Some(pref) = node.params {
            match node.kind {
                LayerKind::Conv { .. } | LayerKind::Dense => {
                    states[pref.weight] = slice_param(&model.states[pref.weight], |t| {
                        slice_axis1(&slice_rows(t, out_kept), in_kept)
                    });
                    states[pref.bias] =
                        slice_param(&model.states[pref.bias], |t| slice_rows(t, out_kept));
                }
                LayerKind::BatchNorm => {
                    states[pref.weight] =
                        slice_param(&model.states[pref.weight], |t| slice_rows(t, out_kept));
                    states[pref.bias] =
                        slice_param(&model.states[pref.bias], |t| slice_rows(t, out_kept));
                    let old = &model.bn[pref.stats.unwrap()];
                    let mut stats = old.clone();
                    stats.running_mean = out_kept.iter().map(|&c| old.running_mean[c]).collect();
                    stats.running_var = out_kept.iter().map(|&c| old.running_var[c]).collect();
                    bn[pref.stats.unwrap()] = stats;
                }
                _ => {}
            }
        }
        nodes.push(new_node);
    }
    let gate_groups: Vec<GateGroup> = graph
        .gate_groups
        .iter()
        .zip(kept)
        .map(|(g, k)| GateGroup {
            id: g.id,
            channels: k.len(),
            sites: g.sites.clone(),
        })
        .collect();
    let pruned_graph =
        GraphSpec::from_parts(nodes, gate_groups, graph.input_shape, graph.class_count);
    pruned_graph.validate()?;

    let mut pruned_bank = bank.clone();
    for (group, k) in pruned_bank.groups.iter_mut().zip(kept) {
        group.weights = k.iter().map(|&c| group.weights[c]).collect();
        group.moment1 = k.iter().map(|&c| group.moment1[c]).collect();
        group.moment2 = k.iter().map(|&c| group.moment2[c]).collect();
    }
    Ok(PruneOutcome {
        graph: pruned_graph,
        params: ModelParams { states, bn },
        bank: pruned_bank,
        kept: kept.to_vec(),
    })
}

/// Threshold the bank's keep-probabilities (with the one-channel guard)
/// and physically remove everything below.
pub fn prune(
    graph: &GraphSpec,
    model: &ModelParams,
    bank: &AgentBank,
    threshold: f64,
) -> Result<PruneOutcome> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config {
            reason: format!("threshold must lie in (0,1), got {threshold}"),
        });
    }
    let kept = kept_sets(bank, threshold);
    prune_with_kept(graph, model, bank, &kept)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// Before/after accounting with pruned-rate percentages (one decimal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_pruned_rate: f64,
    pub flops_pruned_rate: f64,
    pub per_layer: Vec<LayerChannelRow>,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChannelRow {
    pub node: usize,
    pub kind: String,
    pub channels_before: usize,
    pub channels_after: usize,
}

/// (1 - after/before) * 100, rounded to one decimal.
pub fn pruned_rate(before: u64, after: u64) -> f64 {
    if before == 0 {
        return 0.0;
    }
    let raw = (1.0 - after as f64 / before as f64) * 100.0;
    (raw * 10.0).round() / 10.0
}

/// Pair counts from an original and a pruned graph into a report.
pub fn compression_report(
    original: &GraphSpec,
    pruned: &GraphSpec,
    accuracy_before: Option<f64>,
    accuracy_after: Option<f64>,
) -> CompressionReport {
    let (pb, fb) = measure(original, None);
    let (pa, fa) = measure(pruned, None);
    let per_layer = original
        .nodes
        .iter()
        .zip(&pruned.nodes)
        .filter(|(n, _)| n.kind.is_conv_or_dense())
        .map(|(n, p)| LayerChannelRow {
            node: n.id,
            kind: match n.kind {
                LayerKind::Dense => "dense".into(),
                _ => "conv".into(),
            },
            channels_before: n.out_channels,
            channels_after: p.out_channels,
        })
        .collect();
    CompressionReport {
        params_before: pb,
        params_after: pa,
        flops_before: fb,
        flops_after: fa,
        params_pruned_rate: pruned_rate(pb, pa),
        flops_pruned_rate: pruned_rate(fb, fa),
        per_layer,
        accuracy_before,
        accuracy_after,
    }
}

/// Report from raw counts (no graphs involved).
pub fn report_from_counts(
    params_before: u64,
    params_after: u64,
    flops_before: u64,
    flops_after: u64,
) -> CompressionReport {
    CompressionReport {
        params_before,
        params_after,
        flops_before,
        flops_after,
        params_pruned_rate: pruned_rate(params_before, params_after),
        flops_pruned_rate: pruned_rate(flops_before, flops_after),
        per_layer: Vec::new(),
        accuracy_before: None,
        accuracy_after: None,
    }
}

/// Per-layer kept-channel table as CSV.
pub fn per_layer_csv(report: &CompressionReport) -> String {
    let mut out = String::from("node,kind,channels_before,channels_after\n");
    for row in &report.per_layer {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.node, row.kind, row.channels_before, row.channels_after
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Importance ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationOrder {
    Highest,
    Lowest,
}

/// Zero-mask the k channels with the highest (or lowest) agent weights
/// across the whole bank and measure accuracy. Purely an evaluation; the
/// network and bank are untouched afterwards.
pub fn ablate_topk(
    graph: &GraphSpec,
    model: &ModelParams,
    bank: &AgentBank,
    k: usize,
    order: AblationOrder,
    images: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let total = bank.total_channels();
    if k > total {
        return Err(Error::IndexOutOfRange {
            what: "ablation k",
            value: k,
            limit: total,
        });
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (gi, group) in bank.groups.iter().enumerate() {
        for (j, &w) in group.weights.iter().enumerate() {
            ranked.push((w, gi, j));
        }
    }
    ranked.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    if order == AblationOrder::Highest {
        ranked.reverse();
    }
    let mut kept: Vec<Vec<bool>> = bank
        .groups
        .iter()
        .map(|g| vec![true; g.weights.len()])
        .collect();
    for &(_, gi, j) in ranked.iter().take(k) {
        kept[gi][j] = false;
    }
    let masks = MaskSet::from_kept(&kept);
    let mut scratch = model.clone();
    batched_accuracy(graph, &mut scratch, images, labels, Some(&masks), 256)
}
