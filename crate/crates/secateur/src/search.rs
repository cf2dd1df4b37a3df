//! Retraining-free compressed-architecture search: drop channels in
//! ascending agent-weight order until a memory or FLOPs budget is met.
//!
//! The measured quantity is recomputed exactly after every removal (channel
//! effects couple across adjacent layers, so no estimate is trusted), and
//! shared residual groups lose the channel on all member tensors at once.

use serde::{Deserialize, Serialize};

use crate::agent::AgentBank;
use crate::error::{Error, Result};
use crate::graph::{GraphSpec, ModelParams};
use crate::prune::{
    compression_report, measure_with_kept, prune_with_kept, CompressionReport, PruneOutcome,
};

/// Model size assumes 32-bit parameter storage.
pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    MaxBytes(u64),
    MaxFlops(u64),
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Constraint::MaxBytes(b) => write!(f, "max_bytes {b}"),
            Constraint::MaxFlops(m) => write!(f, "max_flops {m}"),
        }
    }
}

fn measured_value(constraint: Constraint, params: u64, flops: u64) -> u64 {
    match constraint {
        Constraint::MaxBytes(_) => params * BYTES_PER_PARAM,
        Constraint::MaxFlops(_) => flops,
    }
}

fn limit(constraint: Constraint) -> u64 {
    match constraint {
        Constraint::MaxBytes(b) => b,
        Constraint::MaxFlops(m) => m,
    }
}

/// Measure a graph against a budget: true iff it fits, plus the measured
/// bytes or FLOPs.
pub fn verify_constraint(graph: &GraphSpec, constraint: Constraint) -> (bool, u64) {
    let params = crate::prune::count_params(graph);
    let flops = crate::prune::count_flops(graph);
    let value = measured_value(constraint, params, flops);
    (value <= limit(constraint), value)
}

/// A compressed architecture found by the search, with the realized
/// removal sequence for auditability.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub pruned: PruneOutcome,
    pub report: CompressionReport,
    /// (group id, channel index) in the order channels were removed.
    pub removal_order: Vec<(usize, usize)>,
    /// Measured bytes or FLOPs of the returned architecture.
    pub measured: u64,
}

/// Remove channels strictly in ascending agent-weight order (ties broken
/// by group id, then channel index; each group keeps at least one channel)
/// and stop at the first architecture that satisfies the constraint.
/// Network weights are only read, never modified.
pub fn search_by_constraint(
    graph: &GraphSpec,
    model: &ModelParams,
    bank: &AgentBank,
    constraint: Constraint,
) -> Result<SearchOutcome> {
    if limit(constraint) == 0 {
        return Err(Error::Config {
            reason: "constraint must be positive".into(),
        });
    }
    graph.validate()?;
    if bank.groups.len() != graph.gate_groups.len() {
        return Err(Error::ShapeMismatch {
            op: "search",
            dimension: "gate groups",
            expected: graph.gate_groups.len(),
            actual: bank.groups.len(),
        });
    }

    let mut keep: Vec<Vec<bool>> = bank
        .groups
        .iter()
        .map(|g| vec![true; g.weights.len()])
        .collect();
    let mut kept_counts: Vec<usize> = keep.iter().map(Vec::len).collect();

    let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(bank.total_channels());
    for (gi, group) in bank.groups.iter().enumerate() {
        for (j, &w) in group.weights.iter().enumerate() {
            order.push((w, gi, j));
        }
    }
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let fits = |counts: &[usize]| -> (bool, u64) {
        let (p, f) = measure_with_kept(graph, counts);
        let value = measured_value(constraint, p, f);
        (value <= limit(constraint), value)
    };

    let mut removal_order = Vec::new();
    let (mut satisfied, mut measured) = fits(&kept_counts);
    if !satisfied {
        for &(_, gi, j) in &order {
            if kept_counts[gi] <= 1 {
                continue; // guard: never empty a group
            }
            keep[gi][j] = false;
            kept_counts[gi] -= 1;
            removal_order.push((gi, j));
            let (ok, value) = fits(&kept_counts);
            measured = value;
            if ok {
                satisfied = true;
                break;
            }
        }
    }
    if !satisfied {
        return Err(Error::UnsatisfiableConstraint {
            constraint: constraint.to_string(),
            floor: measured,
        });
    }

    let kept_sets: Vec<Vec<usize>> = keep
        .iter()
        .map(|flags| {
            flags
                .iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let pruned = prune_with_kept(graph, model, bank, &kept_sets)?;
    let (ok, value) = verify_constraint(&pruned.graph, constraint);
    debug_assert!(ok, "search postcondition");
    let report = compression_report(graph, &pruned.graph, None, None);
    Ok(SearchOutcome {
        pruned,
        report,
        removal_order,
        measured: value,
    })
}
