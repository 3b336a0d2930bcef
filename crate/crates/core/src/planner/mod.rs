//! Minimum-communication partition planning: a dynamic program over the
//! coarsened chain finds the best basic plan for one split; applied
//! recursively it partitions for any worker count. A brute-force oracle over
//! plan sequences verifies optimality on small fixtures.

mod dp;
mod oracle;
mod state;

pub use dp::{cost_by_ops, dp_partition, dp_partition_with, DpConfig, SearchStats, StepStats};
pub use oracle::brute_force_oracle;
pub use state::{
    BasicPlan, ChoiceKind, PlanBase, PlanGraph, PlanState, StepRec, StrategyChoice, ELEM_BYTES,
};

use crate::coarsen::coarsen;
use crate::error::PlanError;
use crate::graph::DataflowGraph;
use crate::tdl::{Program, Rat};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A full recursive plan: one basic plan per factor of the worker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursivePlan {
    pub workers: u64,
    pub factors: Vec<usize>,
    pub steps: Vec<BasicPlan>,
    /// Total bytes moved by all worker groups at each step.
    pub step_costs: Vec<u64>,
    pub total_cost: u64,
}

/// Prime factorization of the worker count, non-increasing.
pub fn factorize_workers(k: u64) -> Vec<usize> {
    assert!(k >= 2, "need at least two workers");
    let mut n = k;
    let mut fs = Vec::new();
    let mut d = 2;
    while d * d <= n {
        while n % d == 0 {
            fs.push(d as usize);
            n /= d;
        }
        d += 1;
    }
    if n > 1 {
        fs.push(n as usize);
    }
    fs.sort_unstable_by(|a, b| b.cmp(a));
    fs
}

/// Total communication of one basic plan on a graph or sub-graph.
pub fn plan_cost(pg: &PlanGraph, plan: &BasicPlan) -> Result<u64, PlanError> {
    pg.plan_cost(plan)
}

/// Find the minimum-communication recursive plan for `workers`.
pub fn recursive_partition(
    g: &DataflowGraph,
    prog: &Program,
    workers: u64,
) -> Result<RecursivePlan, PlanError> {
    recursive_partition_stats(g, prog, workers, &DpConfig::default()).map(|(p, _)| p)
}

/// As [`recursive_partition`], also returning exact search counters.
pub fn recursive_partition_stats(
    g: &DataflowGraph,
    prog: &Program,
    workers: u64,
    cfg: &DpConfig,
) -> Result<(RecursivePlan, SearchStats), PlanError> {
    let cg = coarsen(g, prog)?;
    let factors = factorize_workers(workers);
    let mut pg = PlanGraph::new(g, prog)?;
    let mut steps = Vec::new();
    let mut step_costs = Vec::new();
    let mut stats = SearchStats { steps: Vec::new() };
    for &s in &factors {
        let (mut plan, st) = dp_partition_with(&pg, &cg, s, cfg)?;
        let delta = pg.plan_cost(&plan)?;
        plan.cost = delta;
        let (next, _) = pg.apply(&plan)?;
        steps.push(plan);
        step_costs.push(delta);
        stats.steps.push(st);
        pg = next;
    }
    let total_cost = step_costs.iter().sum();
    Ok((
        RecursivePlan {
            workers,
            factors,
            steps,
            step_costs,
            total_cost,
        },
        stats,
    ))
}

/// Replay a plan's rewrites, returning the planning state after every step
/// together with the per-step movement records of every group.
pub fn replay(
    g: &DataflowGraph,
    prog: &Program,
    plan: &RecursivePlan,
) -> Result<(Vec<PlanGraph>, Vec<Vec<Vec<StepRec>>>), PlanError> {
    let mut pg = PlanGraph::new(g, prog)?;
    let mut stages = Vec::new();
    let mut recs = Vec::new();
    for step in &plan.steps {
        let (next, r) = pg.apply(step)?;
        stages.push(pg);
        recs.push(r);
        pg = next;
    }
    stages.push(pg);
    Ok((stages, recs))
}

/// Per-tensor communication coefficients of a plan on a (sub-)graph:
/// `cost = sum(alpha_t * bytes_t)`. The coefficients are exact rationals; on
/// halo-free graphs they depend only on the plan's structure, which is what
/// makes cost a weighted sum of tensor sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVector {
    pub alpha: BTreeMap<String, Rat>,
}

impl CostVector {
    /// Evaluate against tensor byte sizes.
    pub fn dot(&self, sizes: &BTreeMap<String, u64>) -> Rat {
        let mut acc = Rat::from_integer(0);
        for (t, a) in &self.alpha {
            acc += *a * Rat::from_integer(sizes[t] as i64);
        }
        acc
    }
}

/// Attribute a plan's cost to the original tensors: fetches to the fetched
/// tensor, output and reduction movement to the output tensor.
pub fn cost_vector(pg: &PlanGraph, plan: &BasicPlan) -> Result<CostVector, PlanError> {
    let mut by_tensor: BTreeMap<String, u64> = BTreeMap::new();
    for st in &pg.states {
        for rec in st.records(&pg.base, plan)? {
            let origin = match &rec {
                StepRec::Fetch { piece, .. } => st.tensors[piece].origin.clone(),
                StepRec::AddFetch { partial, .. } => st.tensors[partial].origin.clone(),
                StepRec::ReduceSend { op, .. } | StepRec::OutShip { op, .. } => {
                    st.ops[op].out_root.clone()
                }
            };
            *by_tensor.entry(origin).or_default() += rec.bytes();
        }
    }
    let sizes = tensor_sizes(pg);
    let mut alpha = BTreeMap::new();
    for id in pg.base.graph.tensors.keys() {
        let moved = by_tensor.get(id).copied().unwrap_or(0);
        let size = sizes[id];
        let a = if size == 0 {
            Rat::from_integer(0)
        } else {
            Rat::new(moved as i64, size as i64)
        };
        alpha.insert(id.clone(), a);
    }
    Ok(CostVector { alpha })
}

/// Current byte sizes of the original tensors in the first group of a
/// (sub-)graph.
pub fn tensor_sizes(pg: &PlanGraph) -> BTreeMap<String, u64> {
    pg.base
        .graph
        .tensors
        .keys()
        .map(|id| {
            let bx = &pg.states[0].tensors[id].bx;
            (id.clone(), bx.elems() * ELEM_BYTES)
        })
        .collect()
}
