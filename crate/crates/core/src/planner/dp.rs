//! Dynamic program over the coarsened chain for one `s`-way split.
//!
//! The state at each cut is the tuple of split dimensions of the choice
//! classes crossing it; processing a group enumerates its internal classes
//! and next-cut classes jointly, folding each operator class to its cheapest
//! strategy given the tensor dimensions. Candidate evaluation is pure and
//! runs data-parallel when the `parallel` feature is enabled; the winner is
//! selected with a total order so the result is schedule-independent.

use super::state::{BasicPlan, ChoiceKind, PlanGraph, PlanState, StrategyChoice, ELEM_BYTES};
use crate::coarsen::{ClassKind, CoarsenedGraph};
use crate::error::PlanError;
use crate::interval::AnalysisCtx;
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone)]
pub struct DpConfig {
    /// Evaluate candidates with rayon when available.
    pub parallel: bool,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            parallel: cfg!(feature = "parallel"),
        }
    }
}

/// Exact search counters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchStats {
    pub steps: Vec<StepStats>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    /// Tensor-dimension configurations enumerated per group transition.
    pub per_group: Vec<u64>,
    /// Their sum.
    pub configs: u64,
}

impl SearchStats {
    pub fn total_configs(&self) -> u64 {
        self.steps.iter().map(|s| s.configs).sum()
    }
}

/// Find the cheapest basic plan for an `s`-way split of the current graph.
pub fn dp_partition(
    pg: &PlanGraph,
    cg: &CoarsenedGraph,
    ways: usize,
) -> Result<BasicPlan, PlanError> {
    dp_partition_with(pg, cg, ways, &DpConfig::default()).map(|(p, _)| p)
}

/// Options a class may take at the current level, as strategy/dim indices.
pub(crate) fn class_options(
    pg: &PlanGraph,
    cg: &CoarsenedGraph,
    class: usize,
    ways: usize,
) -> Result<Vec<u8>, PlanError> {
    let st = &pg.states[0];
    let cls = &cg.classes[class];
    match &cls.kind {
        ClassKind::Dim => {
            let rank = pg.base.graph.tensors[&cls.tensors[0]].shape.len();
            let mut opts = Vec::new();
            'dims: for d in 0..rank {
                for t in &cls.tensors {
                    let e = st.tensors[t].bx.extent(d);
                    if e % ways as i64 != 0 || e == 0 {
                        continue 'dims;
                    }
                }
                // Element-wise member ops must be splittable along d too.
                for o in &cls.ops {
                    if !strategy_allowed(pg, o, d, ways) {
                        continue 'dims;
                    }
                }
                opts.push(d as u8);
            }
            if opts.is_empty() {
                return Err(PlanError::IndivisibleShape(cls.tensors[0].clone()));
            }
            Ok(opts)
        }
        ClassKind::Strategy(def) => {
            let menu = &pg.base.menus[def];
            let mut opts = Vec::new();
            'strats: for (i, choice) in menu.iter().enumerate() {
                for o in &cls.ops {
                    let op = &st.ops[o];
                    let (lo, hi) = op.frame[&choice.split_var];
                    if (hi - lo) % ways as i64 != 0 || hi == lo {
                        continue 'strats;
                    }
                }
                opts.push(i as u8);
            }
            if opts.is_empty() {
                return Err(PlanError::NoStrategy(cls.ops[0].clone()));
            }
            Ok(opts)
        }
    }
}

fn strategy_allowed(pg: &PlanGraph, op: &str, dim: usize, ways: usize) -> bool {
    let st = &pg.states[0];
    let o = &st.ops[op];
    let ctx = pg.base.ctx(&o.def);
    let Some(var) = ctx.def.output_vars.get(dim) else {
        return false;
    };
    let menu = &pg.base.menus[&o.def];
    if !menu
        .iter()
        .any(|c| c.kind == ChoiceKind::Concat { dim } && &c.split_var == var)
    {
        return false;
    }
    let (lo, hi) = o.frame[var];
    (hi - lo) % ways as i64 == 0 && hi > lo
}

/// Per-group communication of one op under a candidate assignment, summed
/// over all sub-parts and all current groups.
pub(crate) fn op_cost(
    pg: &PlanGraph,
    opid: &str,
    choice: &StrategyChoice,
    ways: usize,
    dim_of: &dyn Fn(&str) -> usize,
) -> u64 {
    let s = ways;
    let mut elems = 0u64;
    for st in &pg.states {
        elems += op_cost_one(st, pg, opid, choice, s, dim_of);
    }
    elems * ELEM_BYTES
}

fn op_cost_one(
    st: &PlanState,
    pg: &PlanGraph,
    opid: &str,
    choice: &StrategyChoice,
    s: usize,
    dim_of: &dyn Fn(&str) -> usize,
) -> u64 {
    let op = &st.ops[opid];
    let ctx: &AnalysisCtx = pg.base.ctx(&op.def);
    let var = choice.split_var.as_str();
    let (flo, fhi) = op.frame[var];
    let w = (fhi - flo) / s as i64;
    let part = |j: usize| (flo + j as i64 * w, flo + (j as i64 + 1) * w);
    let mut elems = 0u64;
    for (slot, pieces) in op.slots.iter().enumerate() {
        for piece_id in pieces {
            let piece = &st.tensors[piece_id];
            let d = dim_of(&piece.origin);
            for j in 0..s {
                let req = st.required_region(ctx, op, slot, Some((var, part(j))));
                let need = req.intersect(&piece.bx);
                if need.is_empty() {
                    continue;
                }
                let keep = piece.bx.slice(d, j, s);
                elems += need.elems() - need.intersect(&keep).elems();
            }
        }
    }
    for add in st.adds.iter().filter(|a| a.op == opid) {
        let pt = &st.tensors[&add.partial];
        let lt = &st.tensors[&add.lhs];
        let d = dim_of(&pt.origin);
        for j in 0..s {
            let req = lt.bx.slice(d, j, s).intersect(&pt.bx);
            if req.is_empty() {
                continue;
            }
            let keep = pt.bx.slice(d, j, s);
            elems += req.elems() - req.intersect(&keep).elems();
        }
    }
    let out = &st.tensors[&op.out_target];
    let od = dim_of(&out.origin);
    match choice.kind {
        ChoiceKind::Concat { .. } => {
            for j in 0..s {
                let produced = st.out_image(ctx, op, Some((var, part(j))));
                for to in 0..s {
                    if to != j {
                        elems += produced.intersect(&out.bx.slice(od, to, s)).elems();
                    }
                }
            }
        }
        ChoiceKind::Reduce { .. } => {
            let pbox = st.out_image(ctx, op, None);
            for to in 0..s {
                elems += (s as u64 - 1) * pbox.slice(od, to, s).elems();
            }
        }
    }
    elems
}

/// The DP proper.
pub fn dp_partition_with(
    pg: &PlanGraph,
    cg: &CoarsenedGraph,
    ways: usize,
    cfg: &DpConfig,
) -> Result<(BasicPlan, StepStats), PlanError> {
    assert!(ways >= 2);
    let ncls = cg.classes.len();
    let mut options: Vec<Vec<u8>> = Vec::with_capacity(ncls);
    for c in 0..ncls {
        options.push(class_options(pg, cg, c, ways)?);
    }

    // Where each class is decided: the first transition whose prev-cut,
    // group, or next-cut mentions it.
    let q = cg.groups.len();
    let mut decided_at: Vec<Option<usize>> = vec![None; ncls];
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); q]; // classes per transition
    for gi in 0..q {
        let mut here: Vec<usize> = Vec::new();
        for t in &cg.groups[gi].tensors {
            here.push(cg.tensor_class[t]);
        }
        for o in &cg.groups[gi].ops {
            here.push(cg.op_class[o]);
            let op = &pg.base.graph.ops[o];
            for t in op.inputs.iter().chain([&op.output]) {
                here.push(cg.tensor_class[t]);
            }
        }
        here.sort_unstable();
        here.dedup();
        incident[gi] = here;
    }

    // DP over cuts.
    type Key = Vec<u8>;
    struct Entry {
        cost: u64,
        back: Option<(Key, Vec<(usize, u8)>)>,
    }
    let mut table: HashMap<Key, Entry> = HashMap::new();
    table.insert(
        Vec::new(),
        Entry {
            cost: 0,
            back: None,
        },
    );
    let mut backs: Vec<HashMap<Key, Entry>> = Vec::with_capacity(q);
    let mut per_group: Vec<u64> = Vec::with_capacity(q);

    for gi in 0..q {
        let prev_cut = &cg.dp_cuts[gi];
        let next_cut = &cg.dp_cuts[gi + 1];
        // Classes to enumerate at this transition: incident or next-cut
        // classes not already fixed by the previous cut.
        let mut enumerate: Vec<usize> = incident[gi]
            .iter()
            .chain(next_cut.iter())
            .copied()
            .filter(|c| !prev_cut.contains(c))
            .collect();
        enumerate.sort_unstable();
        enumerate.dedup();
        enumerate.retain(|c| {
            if decided_at[*c].is_some() {
                false
            } else {
                decided_at[*c] = Some(gi);
                true
            }
        });

        // Cost tables per op class incident to this group.
        let mut op_classes: Vec<usize> = cg.groups[gi]
            .ops
            .iter()
            .map(|o| cg.op_class[o])
            .collect();
        op_classes.sort_unstable();
        op_classes.dedup();
        // For each op class: the sorted list of classes its cost depends on.
        let depends: Vec<Vec<usize>> = op_classes
            .iter()
            .map(|&oc| {
                let mut d: Vec<usize> = Vec::new();
                for o in &cg.classes[oc].ops {
                    let op = &pg.base.graph.ops[o];
                    for t in op.inputs.iter().chain([&op.output]) {
                        d.push(cg.tensor_class[t]);
                    }
                }
                if cg.classes[oc].kind != ClassKind::Dim {
                    d.push(oc);
                }
                d.sort_unstable();
                d.dedup();
                d
            })
            .collect();

        // Pre-tabulate each op class over its dependency assignments.
        let tabulate = |oc_i: usize| -> HashMap<Vec<u8>, (u64, u8)> {
            let oc = op_classes[oc_i];
            let deps = &depends[oc_i];
            let mut out = HashMap::new();
            let dims_opts: Vec<&[u8]> = deps.iter().map(|&c| options[c].as_slice()).collect();
            let mut combo: Vec<usize> = vec![0; deps.len()];
            loop {
                let assign: Vec<u8> = combo
                    .iter()
                    .zip(&dims_opts)
                    .map(|(&i, o)| o[i])
                    .collect();
                let lookup_dim = |t: &str| -> usize {
                    let c = cg.tensor_class[t];
                    let pos = deps.binary_search(&c).expect("dependency listed");
                    assign[pos] as usize
                };
                // Evaluate: shared strategy classes try each strategy;
                // dim-kind op classes are fixed by the tensor dim.
                let cls = &cg.classes[oc];
                let best: (u64, u8);
                match &cls.kind {
                    ClassKind::Dim => {
                        // Choice comes from the class's own dim assignment.
                        let d = lookup_dim(&cls.tensors[0]) as u8;
                        let mut cost = 0;
                        for o in &cls.ops {
                            let def = &pg.states[0].ops[o].def;
                            let ctx = pg.base.ctx(def);
                            let choice = StrategyChoice {
                                split_var: ctx.def.output_vars[d as usize].clone(),
                                kind: ChoiceKind::Concat { dim: d as usize },
                            };
                            cost += op_cost(pg, o, &choice, ways, &|t| lookup_dim(t));
                        }
                        best = (cost, d);
                    }
                    ClassKind::Strategy(def) => {
                        let pos = deps.binary_search(&oc).expect("own class listed");
                        let si = assign[pos];
                        let choice = &pg.base.menus[def][si as usize];
                        let mut cost = 0;
                        for o in &cls.ops {
                            cost += op_cost(pg, o, choice, ways, &|t| lookup_dim(t));
                        }
                        best = (cost, si);
                    }
                }
                out.insert(assign, best);
                // Odometer.
                let mut d = deps.len();
                loop {
                    if d == 0 {
                        return out;
                    }
                    d -= 1;
                    combo[d] += 1;
                    if combo[d] < dims_opts[d].len() {
                        break;
                    }
                    combo[d] = 0;
                }
            }
        };
        let tables: Vec<HashMap<Vec<u8>, (u64, u8)>> =
            maybe_par_map(cfg.parallel, op_classes.len(), tabulate);

        // Enumerate transitions.
        let mut prev_entries: Vec<(Key, u64)> = table
            .iter()
            .map(|(k, e)| (k.clone(), e.cost))
            .collect();
        prev_entries.sort();
        let enum_opts: Vec<&[u8]> = enumerate.iter().map(|&c| options[c].as_slice()).collect();
        let combos: u64 = enum_opts.iter().map(|o| o.len() as u64).product();
        per_group.push(prev_entries.len() as u64 * combos);

        let class_pos = |c: usize, prev: &Key, local: &[u8]| -> u8 {
            if let Ok(p) = prev_cut.binary_search(&c) {
                return prev[p];
            }
            let p = enumerate.binary_search(&c).expect("class decided here");
            local[p]
        };

        let eval_prev = |(pkey, pcost): &(Key, u64)| -> Vec<(Key, u64, Vec<(usize, u8)>)> {
            let mut results = Vec::new();
            let mut combo: Vec<usize> = vec![0; enumerate.len()];
            loop {
                let local: Vec<u8> = combo
                    .iter()
                    .zip(&enum_opts)
                    .map(|(&i, o)| o[i])
                    .collect();
                let mut cost = *pcost;
                for (oc_i, deps) in depends.iter().enumerate() {
                    let key: Vec<u8> = deps
                        .iter()
                        .map(|&c| class_pos(c, pkey, &local))
                        .collect();
                    cost += tables[oc_i][&key].0;
                }
                let next_key: Key = next_cut
                    .iter()
                    .map(|&c| class_pos(c, pkey, &local))
                    .collect();
                let assignment: Vec<(usize, u8)> = enumerate
                    .iter()
                    .copied()
                    .zip(local.iter().copied())
                    .collect();
                results.push((next_key, cost, assignment));
                let mut d = enumerate.len();
                loop {
                    if d == 0 {
                        return results;
                    }
                    d -= 1;
                    combo[d] += 1;
                    if combo[d] < enum_opts[d].len() {
                        break;
                    }
                    combo[d] = 0;
                }
            }
        };
        let produced: Vec<Vec<(Key, u64, Vec<(usize, u8)>)>> =
            maybe_par_map_ref(cfg.parallel, &prev_entries, eval_prev);

        let mut next_table: HashMap<Key, Entry> = HashMap::new();
        for ((pkey, _), results) in prev_entries.iter().zip(produced) {
            for (nk, cost, assignment) in results {
                let better = match next_table.get(&nk) {
                    None => true,
                    Some(e) => cost < e.cost,
                };
                if better {
                    next_table.insert(
                        nk,
                        Entry {
                            cost,
                            back: Some((pkey.clone(), assignment)),
                        },
                    );
                }
            }
        }
        backs.push(std::mem::take(&mut table));
        table = next_table;
    }

    // Reconstruct.
    let (final_key, mut entry) = table
        .into_iter()
        .min_by(|a, b| (a.1.cost, &a.0).cmp(&(b.1.cost, &b.0)))
        .ok_or_else(|| PlanError::IncompletePlan("empty search table".into()))?;
    let mut chosen: Vec<Option<u8>> = vec![None; ncls];
    let _ = final_key;
    for gi in (0..q).rev() {
        let Some((pkey, assignment)) = entry.back.take() else {
            break;
        };
        for (c, v) in assignment {
            chosen[c] = Some(v);
        }
        entry = backs[gi].remove(&pkey).expect("back entry");
    }
    // Classes never touched by any group (isolated tensors).
    for c in 0..ncls {
        if chosen[c].is_none() {
            chosen[c] = Some(options[c][0]);
        }
    }

    // Expand classes into a concrete plan, folding op strategies.
    let mut tensor_dims = BTreeMap::new();
    let mut op_strategies = BTreeMap::new();
    for (c, cls) in cg.classes.iter().enumerate() {
        let v = chosen[c].unwrap();
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
    let mut plan = BasicPlan {
        ways,
        tensor_dims,
        op_strategies,
        cost: 0,
    };
    plan.cost = pg.plan_cost(&plan)?;

    let stats = StepStats {
        configs: per_group.iter().sum(),
        per_group,
    };
    Ok((plan, stats))
}

#[cfg(feature = "parallel")]
fn maybe_par_map<T: Send>(par: bool, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    if par {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn maybe_par_map<T>(_par: bool, n: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
fn maybe_par_map_ref<I: Sync, T: Send>(par: bool, items: &[I], f: impl Fn(&I) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    if par {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn maybe_par_map_ref<I, T>(_par: bool, items: &[I], f: impl Fn(&I) -> T) -> Vec<T> {
    items.iter().map(f).collect()
}

/// Independent evaluation route used by tests: sum of per-op closed-form
/// costs must equal the record-based accounting for every complete plan.
pub fn cost_by_ops(pg: &PlanGraph, plan: &BasicPlan) -> u64 {
    let dim_of = |t: &str| plan.tensor_dims[t];
    let mut total = 0;
    for opid in pg.base.graph.ops.keys() {
        total += op_cost(pg, opid, &plan.op_strategies[opid], plan.ways, &dim_of);
    }
    total
}
