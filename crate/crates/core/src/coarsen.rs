//! Graph coarsening: group forward and backward work, coalesce element-wise
//! chains and unrolled timesteps, and order the groups into a chain for the
//! planner.
//!
//! Two distinct mechanisms are at work. Structural grouping (an operator with
//! its backward operators, a tensor with its gradient and gradient-summation
//! operators) shrinks the chain but leaves every member a free choice.
//! Choice-sharing (element-wise chains, unrolled timesteps) ties members of a
//! class to a single decision.

use crate::error::GraphError;
use crate::graph::DataflowGraph;
use crate::tdl::{classify, OpClass, Program};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default)]
pub struct Group {
    pub tensors: Vec<String>,
    pub ops: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassKind {
    /// Choice is a dimension index, applied to member tensors and (for
    /// element-wise members) as a concat strategy to member ops.
    Dim,
    /// Choice is a strategy index into the named definition's strategy list.
    Strategy(String),
}

/// A set of nodes tied to one shared partition decision.
#[derive(Debug, Clone)]
pub struct ChoiceClass {
    pub tensors: Vec<String>,
    pub ops: Vec<String>,
    pub kind: ClassKind,
}

#[derive(Debug, Clone)]
pub struct CoarsenOpts {
    /// Reject cuts whose state count would exceed this.
    pub state_limit: u128,
}

impl Default for CoarsenOpts {
    fn default() -> Self {
        CoarsenOpts {
            state_limit: 1_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoarsenedGraph {
    /// Groups in chain order.
    pub groups: Vec<Group>,
    /// Node key (`t:<id>` or `o:<id>`) to group index.
    pub membership: BTreeMap<String, usize>,
    pub classes: Vec<ChoiceClass>,
    pub tensor_class: BTreeMap<String, usize>,
    pub op_class: BTreeMap<String, usize>,
    /// Producing group per tensor (none for graph inputs).
    pub producer_group: BTreeMap<String, Option<usize>>,
    pub consumer_groups: BTreeMap<String, Vec<usize>>,
    /// Class ids crossing each internal cut (tightened: a producerless
    /// tensor is charged to its first consumer's group).
    pub dp_cuts: Vec<Vec<usize>>,
    pub opts: CoarsenOpts,
}

struct Uf(Vec<usize>);

impl Uf {
    fn new(n: usize) -> Self {
        Uf((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let r = self.find(self.0[x]);
            self.0[x] = r;
        }
        self.0[x]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

pub fn coarsen(g: &DataflowGraph, prog: &Program) -> Result<CoarsenedGraph, GraphError> {
    coarsen_with(g, prog, CoarsenOpts::default())
}

pub fn coarsen_with(
    g: &DataflowGraph,
    prog: &Program,
    opts: CoarsenOpts,
) -> Result<CoarsenedGraph, GraphError> {
    let mut keys: Vec<String> = Vec::new();
    let mut idx: BTreeMap<String, usize> = BTreeMap::new();
    for t in g.tensors.keys() {
        idx.insert(format!("t:{t}"), keys.len());
        keys.push(format!("t:{t}"));
    }
    for o in g.ops.keys() {
        idx.insert(format!("o:{o}"), keys.len());
        keys.push(format!("o:{o}"));
    }
    let ti = |t: &str| idx[&format!("t:{t}")];
    let oi = |o: &str| idx[&format!("o:{o}")];

    let is_ew = |op: &str| {
        let def = prog.get(&g.ops[op].def).expect("validated def");
        classify(def) == OpClass::ElementWise
    };

    // Choice-sharing links.
    let mut share = Uf::new(keys.len());
    let mut ts_groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (id, op) in &g.ops {
        if let Some((gid, _)) = &op.timestep {
            ts_groups.entry(gid).or_default().push(oi(id));
        }
    }
    for (id, t) in &g.tensors {
        if let Some((gid, _)) = &t.timestep {
            ts_groups.entry(gid).or_default().push(ti(id));
        }
    }
    for members in ts_groups.values() {
        for w in members.windows(2) {
            share.union(w[0], w[1]);
        }
    }
    for (id, op) in &g.ops {
        if !is_ew(id) {
            continue;
        }
        for c in g.consumers.get(&op.output).map(|v| v.as_slice()).unwrap_or(&[]) {
            if is_ew(c) {
                share.union(oi(id), ti(&op.output));
                share.union(ti(&op.output), oi(c));
            }
        }
    }

    // Structural links extend the sharing links.
    let mut grp = Uf(share.0.clone());
    for (id, op) in &g.ops {
        if let Some(f) = &op.backward_of {
            grp.union(oi(id), oi(f));
        } else if g.tensors[&op.output].grad_of.is_some() {
            // Gradient summation joins the tensor's group.
            let target = g.tensors[&op.output].grad_of.clone().unwrap();
            grp.union(oi(id), ti(&target));
        }
    }
    for (id, t) in &g.tensors {
        if let Some(f) = &t.grad_of {
            grp.union(ti(id), ti(f));
        }
    }

    // Assemble raw groups.
    let mut raw: BTreeMap<usize, Group> = BTreeMap::new();
    for t in g.tensors.keys() {
        raw.entry(grp.find(ti(t))).or_default().tensors.push(t.clone());
    }
    for o in g.ops.keys() {
        raw.entry(grp.find(oi(o))).or_default().ops.push(o.clone());
    }
    let mut groups: Vec<Group> = raw.into_values().collect();

    // Absorb satellite groups: a group adjacent to exactly one other group
    // folds into it (weights, graph inputs, final outputs).
    loop {
        let gidx = group_index(&groups);
        let adj = adjacency(g, &groups, &gidx);
        let Some(victim) = (0..groups.len()).find(|&i| {
            adj[i].len() == 1 && groups.iter().enumerate().any(|(j, _)| j != i)
                && groups[i].ops.iter().all(|o| {
                    // Only ops whose output stays inside may be absorbed.
                    gidx[&format!("t:{}", g.ops[o].output)] == i
                })
        }) else {
            break;
        };
        let host = *adj[victim].iter().next().unwrap();
        let Group { tensors, ops } = groups.remove(victim);
        let host = if host > victim { host - 1 } else { host };
        groups[host].tensors.extend(tensors);
        groups[host].ops.extend(ops);
    }

    // Chain order: forward-topological.
    let topo_idx: BTreeMap<&str, usize> = g
        .topo
        .iter()
        .enumerate()
        .map(|(i, o)| (o.as_str(), i))
        .collect();
    let key_of = |grp: &Group| -> (i64, String) {
        let mut k = i64::MAX;
        for o in &grp.ops {
            k = k.min(2 * topo_idx[o.as_str()] as i64);
        }
        for t in &grp.tensors {
            let pk = match g.producer.get(t) {
                Some(p) => 2 * topo_idx[p.as_str()] as i64 + 1,
                None => {
                    let c = g
                        .consumers
                        .get(t)
                        .and_then(|cs| cs.iter().map(|c| topo_idx[c.as_str()]).min());
                    match c {
                        Some(c) => 2 * c as i64 - 1,
                        None => -1,
                    }
                }
            };
            k = k.min(pk);
        }
        let first = grp
            .tensors
            .iter()
            .chain(&grp.ops)
            .min()
            .cloned()
            .unwrap_or_default();
        (k, first)
    };
    groups.sort_by_key(|grp| key_of(grp));

    let gidx = group_index(&groups);
    linearity_check(g, &groups, &gidx)?;

    // Choice classes from the sharing union-find.
    let mut class_ids: BTreeMap<usize, usize> = BTreeMap::new();
    let mut classes: Vec<ChoiceClass> = Vec::new();
    let mut tensor_class = BTreeMap::new();
    let mut op_class = BTreeMap::new();
    for t in g.tensors.keys() {
        let root = share.find(ti(t));
        let c = *class_ids.entry(root).or_insert_with(|| {
            classes.push(ChoiceClass {
                tensors: Vec::new(),
                ops: Vec::new(),
                kind: ClassKind::Dim,
            });
            classes.len() - 1
        });
        classes[c].tensors.push(t.clone());
        tensor_class.insert(t.clone(), c);
    }
    for o in g.ops.keys() {
        let root = share.find(oi(o));
        let c = *class_ids.entry(root).or_insert_with(|| {
            classes.push(ChoiceClass {
                tensors: Vec::new(),
                ops: Vec::new(),
                kind: ClassKind::Strategy(g.ops[o].def.clone()),
            });
            classes.len() - 1
        });
        classes[c].ops.push(o.clone());
        op_class.insert(o.clone(), c);
    }
    for class in &mut classes {
        if class.ops.is_empty() {
            class.kind = ClassKind::Dim;
            let rank = g.tensors[&class.tensors[0]].shape.len();
            if class.tensors.iter().any(|t| g.tensors[t].shape.len() != rank) {
                return Err(GraphError::Schema(format!(
                    "share class {:?} mixes tensor ranks",
                    class.tensors
                )));
            }
            continue;
        }
        let defs: Vec<&str> = class.ops.iter().map(|o| g.ops[o].def.as_str()).collect();
        let all_same = defs.windows(2).all(|w| w[0] == w[1]);
        let all_ew = class.ops.iter().all(|o| is_ew(o));
        if !class.tensors.is_empty() || !all_same {
            if !all_ew {
                return Err(GraphError::Schema(format!(
                    "share class {:?} mixes definitions and is not element-wise",
                    class.ops
                )));
            }
            class.kind = ClassKind::Dim;
        } else {
            class.kind = ClassKind::Strategy(defs[0].to_string());
        }
        // Shared ops must sit in one group.
        let g0 = gidx[&format!("o:{}", class.ops[0])];
        for o in &class.ops {
            if gidx[&format!("o:{o}")] != g0 {
                return Err(GraphError::Schema(format!(
                    "share class {:?} spans multiple groups",
                    class.ops
                )));
            }
        }
    }

    // Producer/consumer groups and tightened DP cuts.
    let mut producer_group = BTreeMap::new();
    let mut consumer_groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for t in g.tensors.keys() {
        producer_group.insert(
            t.clone(),
            g.producer.get(t).map(|p| gidx[&format!("o:{p}")]),
        );
        let mut cs: Vec<usize> = g
            .consumers
            .get(t)
            .map(|v| v.iter().map(|c| gidx[&format!("o:{c}")]).collect())
            .unwrap_or_default();
        cs.sort_unstable();
        cs.dedup();
        consumer_groups.insert(t.clone(), cs);
    }
    // A tensor's class crosses every cut strictly between the outermost
    // groups that touch it (direction-agnostic: gradients flow backward
    // through the chain).
    let mut dp_cuts: Vec<Vec<usize>> = vec![Vec::new(); groups.len() + 1];
    for t in g.tensors.keys() {
        let mut touched: Vec<usize> = consumer_groups[t].clone();
        if let Some(p) = producer_group[t] {
            touched.push(p);
        }
        touched.push(gidx[&format!("t:{t}")]);
        let lo = *touched.iter().min().unwrap();
        let hi = *touched.iter().max().unwrap();
        for cut in (lo + 1)..=hi {
            let c = tensor_class[t];
            if !dp_cuts[cut].contains(&c) {
                dp_cuts[cut].push(c);
            }
        }
    }
    for cut in &mut dp_cuts {
        cut.sort_unstable();
    }
    for (i, cut) in dp_cuts.iter().enumerate() {
        let states: u128 = cut
            .iter()
            .map(|&c| g.tensors[&classes[c].tensors[0]].shape.len() as u128)
            .product();
        if states > opts.state_limit {
            return Err(GraphError::CutTooWide {
                cut: i,
                states,
                limit: opts.state_limit,
            });
        }
    }

    Ok(CoarsenedGraph {
        groups,
        membership: gidx,
        classes,
        tensor_class,
        op_class,
        producer_group,
        consumer_groups,
        dp_cuts,
        opts,
    })
}

fn group_index(groups: &[Group]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for (i, grp) in groups.iter().enumerate() {
        for t in &grp.tensors {
            m.insert(format!("t:{t}"), i);
        }
        for o in &grp.ops {
            m.insert(format!("o:{o}"), i);
        }
    }
    m
}

fn adjacency(
    g: &DataflowGraph,
    groups: &[Group],
    gidx: &BTreeMap<String, usize>,
) -> Vec<std::collections::BTreeSet<usize>> {
    let mut adj = vec![std::collections::BTreeSet::new(); groups.len()];
    let link = |a: usize, b: usize, adj: &mut Vec<std::collections::BTreeSet<usize>>| {
        if a != b {
            adj[a].insert(b);
            adj[b].insert(a);
        }
    };
    for (id, op) in &g.ops {
        let og = gidx[&format!("o:{id}")];
        for t in op.inputs.iter().chain([&op.output]) {
            let tg = gidx[&format!("t:{t}")];
            link(og, tg, &mut adj);
        }
    }
    adj
}

/// Generalized series-parallel reduction: repeatedly drop pendant vertices,
/// merge parallel edges and contract degree-2 vertices. Anything left over
/// is a genuinely non-linear region.
fn linearity_check(
    g: &DataflowGraph,
    groups: &[Group],
    gidx: &BTreeMap<String, usize>,
) -> Result<(), GraphError> {
    let n = groups.len();
    let mut edges: std::collections::BTreeSet<(usize, usize)> = std::collections::BTreeSet::new();
    for (id, op) in &g.ops {
        let og = gidx[&format!("o:{id}")];
        for t in op.inputs.iter().chain([&op.output]) {
            let tg = gidx[&format!("t:{t}")];
            if og != tg {
                edges.insert((og.min(tg), og.max(tg)));
            }
        }
    }
    let mut alive: Vec<bool> = vec![true; n];
    loop {
        let deg = |v: usize, edges: &std::collections::BTreeSet<(usize, usize)>| {
            edges.iter().filter(|&&(a, b)| a == v || b == v).count()
        };
        let mut changed = false;
        for v in 0..n {
            if !alive[v] {
                continue;
            }
            match deg(v, &edges) {
                0 | 1 => {
                    edges.retain(|&(a, b)| a != v && b != v);
                    alive[v] = false;
                    changed = true;
                }
                2 => {
                    let inc: Vec<(usize, usize)> = edges
                        .iter()
                        .filter(|&&(a, b)| a == v || b == v)
                        .copied()
                        .collect();
                    let other = |e: (usize, usize)| if e.0 == v { e.1 } else { e.0 };
                    let (x, y) = (other(inc[0]), other(inc[1]));
                    if x == y {
                        // Two parallel edges to the same neighbor: drop one.
                        edges.remove(&inc[1]);
                    } else {
                        edges.remove(&inc[0]);
                        edges.remove(&inc[1]);
                        edges.insert((x.min(y), x.max(y)));
                        alive[v] = false;
                    }
                    changed = true;
                }
                _ => {}
            }
        }
        if !changed {
            break;
        }
    }
    if alive.iter().any(|&a| a) {
        let stuck: Vec<String> = (0..n)
            .filter(|&v| alive[v])
            .map(|v| {
                groups[v]
                    .ops
                    .first()
                    .or_else(|| groups[v].tensors.first())
                    .cloned()
                    .unwrap_or_default()
            })
            .collect();
        return Err(GraphError::NotLinear {
            detail: format!("irreducible region around groups {}", stuck.join(", ")),
        });
    }
    Ok(())
}

/// Tensors alive across the cut: produced (or resident) on one side with a
/// consumer on the other. Gradients run backward through the chain, so the
/// check is direction-agnostic; graph inputs count as produced before the
/// chain starts.
pub fn cut_states(
    cg: &CoarsenedGraph,
    g: &DataflowGraph,
    cut: usize,
) -> Result<Vec<String>, GraphError> {
    assert!(cut <= cg.groups.len(), "cut index out of range");
    let mut out = Vec::new();
    let mut states: u128 = 1;
    for (t, prod) in &cg.producer_group {
        let mut touched: Vec<i64> = cg.consumer_groups[t].iter().map(|&c| c as i64).collect();
        touched.push(cg.membership[&format!("t:{t}")] as i64);
        if let Some(p) = prod {
            touched.push(*p as i64);
        } else if g.tensors[t].role == crate::graph::TensorRole::Input {
            touched.push(-1);
        }
        let lo = *touched.iter().min().unwrap();
        let hi = *touched.iter().max().unwrap();
        if lo < cut as i64 && cut as i64 <= hi {
            out.push(t.clone());
            states = states.saturating_mul(4);
        }
    }
    if states > cg.opts.state_limit {
        return Err(GraphError::CutTooWide {
            cut,
            states,
            limit: cg.opts.state_limit,
        });
    }
    out.sort();
    Ok(out)
}
