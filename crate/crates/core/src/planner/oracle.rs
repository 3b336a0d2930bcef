//! Exhaustive search over all sequences of basic plans, for verifying the
//! recursive search on small fixtures. Branch-and-bound with the exact
//! prefix cost as the bound, so the returned minimum is the global one.

use super::dp::class_options;
use super::state::{BasicPlan, ChoiceKind, PlanGraph, StrategyChoice};
use super::RecursivePlan;
use crate::coarsen::{coarsen, ClassKind, CoarsenedGraph};
use crate::error::PlanError;
use crate::graph::DataflowGraph;
use crate::tdl::Program;
use std::collections::BTreeMap;

/// Exhaustively search the global minimum-cost plan sequence.
pub fn brute_force_oracle(
    g: &DataflowGraph,
    prog: &Program,
    workers: u64,
    max_size: u128,
) -> Result<RecursivePlan, PlanError> {
    let cg = coarsen(g, prog)?;
    let factors = super::factorize_workers(workers);
    let pg = PlanGraph::new(g, prog)?;

    // Estimated enumeration size: the per-step candidate count at the top
    // level, multiplied across steps.
    let mut estimate: u128 = 1;
    for &s in &factors {
        let mut combos: u128 = 1;
        for c in 0..cg.classes.len() {
            combos = combos.saturating_mul(class_options(&pg, &cg, c, s)?.len() as u128);
        }
        estimate = estimate.saturating_mul(combos);
    }
    if estimate > max_size {
        return Err(PlanError::TooLarge {
            estimate,
            max: max_size,
        });
    }

    let mut best: Option<(u64, Vec<BasicPlan>, Vec<u64>)> = None;
    search(&pg, &cg, &factors, 0, &mut Vec::new(), &mut Vec::new(), &mut best)?;
    let (total_cost, steps, step_costs) =
        best.ok_or_else(|| PlanError::IncompletePlan("no feasible plan sequence".into()))?;
    Ok(RecursivePlan {
        workers,
        factors,
        steps,
        step_costs,
        total_cost,
    })
}

fn search(
    pg: &PlanGraph,
    cg: &CoarsenedGraph,
    factors: &[usize],
    prefix: u64,
    steps: &mut Vec<BasicPlan>,
    costs: &mut Vec<u64>,
    best: &mut Option<(u64, Vec<BasicPlan>, Vec<u64>)>,
) -> Result<(), PlanError> {
    if factors.is_empty() {
        if best.as_ref().is_none_or(|(b, _, _)| prefix < *b) {
            *best = Some((prefix, steps.clone(), costs.clone()));
        }
        return Ok(());
    }
    let s = factors[0];
    let mut plans = enumerate_plans(pg, cg, s)?;
    // Cheapest first so the bound tightens early; cost order then makes the
    // remaining prefix check a clean cutoff within this level.
    let mut scored: Vec<(u64, BasicPlan)> = Vec::with_capacity(plans.len());
    for plan in plans.drain(..) {
        scored.push((pg.plan_cost(&plan)?, plan));
    }
    scored.sort_by(|a, b| a.0.cmp(&b.0));
    for (delta, plan) in scored {
        let lower = prefix + delta;
        if best.as_ref().is_some_and(|(b, _, _)| lower >= *b) {
            break;
        }
        let (next, _) = pg.apply(&plan)?;
        steps.push(plan);
        costs.push(delta);
        search(&next, cg, &factors[1..], lower, steps, costs, best)?;
        steps.pop();
        costs.pop();
    }
    Ok(())
}

/// All complete basic plans at the current level.
fn enumerate_plans(
    pg: &PlanGraph,
    cg: &CoarsenedGraph,
    ways: usize,
) -> Result<Vec<BasicPlan>, PlanError> {
    let ncls = cg.classes.len();
    let mut options = Vec::with_capacity(ncls);
    for c in 0..ncls {
        options.push(class_options(pg, cg, c, ways)?);
    }
    let mut out = Vec::new();
    let mut combo = vec![0usize; ncls];
    loop {
        let mut tensor_dims = BTreeMap::new();
        let mut op_strategies = BTreeMap::new();
        for (c, cls) in cg.classes.iter().enumerate() {
            let v = options[c][combo[c]];
            match &cls.kind {
                ClassKind::Dim => {
                    for t in &cls.tensors {
                        tensor_dims.insert(t.clone(), v as usize);
                    }
                    for o in &cls.ops {
                        let def = &pg.states[0].ops[o].def;
                        let ctx = pg.base.ctx(def);
                        op_strategies.insert(
                            o.clone(),
                            StrategyChoice {
                                split_var: ctx.def.output_vars[v as usize].clone(),
                                kind: ChoiceKind::Concat { dim: v as usize },
                            },
                        );
                    }
                }
                ClassKind::Strategy(def) => {
                    for o in &cls.ops {
                        op_strategies.insert(o.clone(), pg.base.menus[def][v as usize].clone());
                    }
                }
            }
        }
        out.push(BasicPlan {
            ways,
            tensor_dims,
            op_strategies,
            cost: 0,
        });
        let mut d = ncls;
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            combo[d] += 1;
            if combo[d] < options[d].len() {
                break;
            }
            combo[d] = 0;
        }
    }
}
