//! Working state of the recursive partitioning: per worker group, the boxes
//! of every stored tensor (original tensors, staged remote fetches, partial
//! outputs), each operator's current index-variable frame, and which stored
//! pieces cover each input slot.
//!
//! Applying a basic plan splits a group `s` ways. Remote input regions
//! become staged extra tensors of the consuming sub-group; a reduce-split
//! leaves a full-frame partial output plus a spread summation whose later
//! redistribution is charged to the step where it happens. Derived tensors
//! mirror the split dimension of the original tensor they came from, so the
//! search space never grows.

use crate::error::PlanError;
use crate::geom::IBox;
use crate::graph::DataflowGraph;
use crate::interval::{AnalysisCtx, DimAccess};
use crate::strategy::{discover_with_ctx, StrategyKind};
use crate::tdl::Program;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

pub const ELEM_BYTES: u64 = 4;

/// One operator's chosen split for a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyChoice {
    pub split_var: String,
    pub kind: ChoiceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceKind {
    Concat { dim: usize },
    Reduce { reducer: crate::tdl::Reducer },
}

/// One recursive step: every tensor split along one dimension, every
/// operator split along one variable, across `ways` worker groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasicPlan {
    pub ways: usize,
    pub tensor_dims: BTreeMap<String, usize>,
    pub op_strategies: BTreeMap<String, StrategyChoice>,
    /// Within-group total bytes of the first group at planning time.
    pub cost: u64,
}

#[derive(Debug, Clone)]
pub struct StoredTensor {
    pub bx: IBox,
    /// Original graph tensor whose split dimension this tensor follows.
    pub origin: String,
}

#[derive(Debug, Clone)]
pub struct OpState {
    pub def: String,
    /// Current range of every index variable (output and reduce vars).
    pub frame: BTreeMap<String, (i64, i64)>,
    /// Anonymous whole-dimension extents, keyed by symbol name.
    pub bounds: BTreeMap<String, u64>,
    /// Stored pieces covering each input slot, parallel to the def params.
    pub slots: Vec<Vec<String>>,
    /// Tensor currently written by this op (the output tensor, or the most
    /// recent partial after a reduce step).
    pub out_target: String,
    /// The original output tensor.
    pub out_root: String,
}

/// Pending spread-summation left behind by a reduce step: `lhs`'s current
/// box is assembled from `partial` (plus already-delivered remote summands).
#[derive(Debug, Clone)]
pub struct AddNode {
    pub op: String,
    pub lhs: String,
    pub partial: String,
}

/// Immutable planning context shared by all group states.
pub struct PlanBase {
    pub graph: DataflowGraph,
    pub prog: Program,
    /// Strategy menu per definition: split var and combine kind.
    pub menus: BTreeMap<String, Vec<StrategyChoice>>,
}

impl PlanBase {
    pub fn ctx(&self, def: &str) -> &AnalysisCtx {
        &self.graph.analyses[def]
    }
}

#[derive(Debug, Clone)]
pub struct PlanState {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub ops: BTreeMap<String, OpState>,
    pub adds: Vec<AddNode>,
    pub step: u32,
}

/// A graph (or sub-graph) under recursive partitioning: the shared base plus
/// one state per current worker group.
pub struct PlanGraph {
    pub base: Arc<PlanBase>,
    pub states: Vec<PlanState>,
}

/// Data movement implied by one step, within one splitting group.
#[derive(Debug, Clone, PartialEq)]
pub enum StepRec {
    /// Sub-group `to_part` stages `region` of `piece` from `from_part`,
    /// becoming extra tensor `extra` of op `op`'s slot.
    Fetch {
        op: String,
        slot: usize,
        piece: String,
        extra: String,
        to_part: usize,
        from_part: usize,
        region: IBox,
    },
    /// Redistribution of an earlier partial during its pending summation.
    AddFetch {
        op: String,
        partial: String,
        to_part: usize,
        from_part: usize,
        region: IBox,
    },
    /// Reduce split: `from_part` ships its partial restricted to `region`
    /// to the sub-group that reduces and owns that region.
    ReduceSend {
        op: String,
        partial: String,
        from_part: usize,
        to_part: usize,
        region: IBox,
    },
    /// Concat split: produced-but-remotely-owned output region.
    OutShip {
        op: String,
        target: String,
        from_part: usize,
        to_part: usize,
        region: IBox,
    },
}

impl StepRec {
    pub fn bytes(&self) -> u64 {
        let r = match self {
            StepRec::Fetch { region, .. }
            | StepRec::AddFetch { region, .. }
            | StepRec::ReduceSend { region, .. }
            | StepRec::OutShip { region, .. } => region,
        };
        r.elems() * ELEM_BYTES
    }
}

impl PlanGraph {
    pub fn new(graph: &DataflowGraph, prog: &Program) -> Result<Self, PlanError> {
        let mut menus = BTreeMap::new();
        for op in graph.ops.values() {
            if !menus.contains_key(&op.def) {
                let ctx = &graph.analyses[&op.def];
                let list = discover_with_ctx(ctx, 2)
                    .map_err(PlanError::Strategy)?
                    .into_iter()
                    .map(|s| StrategyChoice {
                        split_var: s.split_var,
                        kind: match s.kind {
                            StrategyKind::Concat { dim } => ChoiceKind::Concat { dim },
                            StrategyKind::Reduce(r) => ChoiceKind::Reduce { reducer: r },
                        },
                    })
                    .collect();
                menus.insert(op.def.clone(), list);
            }
        }
        let mut tensors = BTreeMap::new();
        for (id, t) in &graph.tensors {
            tensors.insert(
                id.clone(),
                StoredTensor {
                    bx: IBox::full(&t.shape),
                    origin: id.clone(),
                },
            );
        }
        let mut ops = BTreeMap::new();
        for (id, op) in &graph.ops {
            let ctx = &graph.analyses[&op.def];
            let bindings = &graph.bindings[id];
            let mut frame = BTreeMap::new();
            for v in ctx.def.output_vars.iter().chain(&ctx.def.reduce_vars) {
                let b = bindings[&format!("X_{v}")];
                frame.insert(v.clone(), (0i64, b as i64));
            }
            ops.insert(
                id.clone(),
                OpState {
                    def: op.def.clone(),
                    frame,
                    bounds: bindings.clone(),
                    slots: op.inputs.iter().map(|t| vec![t.clone()]).collect(),
                    out_target: op.output.clone(),
                    out_root: op.output.clone(),
                },
            );
        }
        let base = PlanBase {
            graph: graph.clone(),
            prog: prog.clone(),
            menus,
        };
        Ok(PlanGraph {
            base: Arc::new(base),
            states: vec![PlanState {
                tensors,
                ops,
                adds: Vec::new(),
                step: 0,
            }],
        })
    }

    /// Total within-group communication of one step over all current groups.
    pub fn plan_cost(&self, plan: &BasicPlan) -> Result<u64, PlanError> {
        self.validate_plan(plan)?;
        let mut total = 0u64;
        for st in &self.states {
            total += st.split(&self.base, plan, false)?.1.iter().map(StepRec::bytes).sum::<u64>();
        }
        Ok(total)
    }

    /// Apply one step to every group, returning the refined graph and the
    /// per-group movement records.
    pub fn apply(&self, plan: &BasicPlan) -> Result<(PlanGraph, Vec<Vec<StepRec>>), PlanError> {
        self.validate_plan(plan)?;
        let mut states = Vec::with_capacity(self.states.len() * plan.ways);
        let mut recs = Vec::with_capacity(self.states.len());
        for st in &self.states {
            let (children, r) = st.split(&self.base, plan, true)?;
            states.extend(children);
            recs.push(r);
        }
        Ok((
            PlanGraph {
                base: Arc::clone(&self.base),
                states,
            },
            recs,
        ))
    }

    fn validate_plan(&self, plan: &BasicPlan) -> Result<(), PlanError> {
        for (id, t) in &self.base.graph.tensors {
            let d = *plan
                .tensor_dims
                .get(id)
                .ok_or_else(|| PlanError::IncompletePlan(format!("tensor `{id}` unassigned")))?;
            if d >= t.shape.len().max(1) {
                return Err(PlanError::IncompletePlan(format!(
                    "tensor `{id}` split on dim {d} of rank {}",
                    t.shape.len()
                )));
            }
        }
        for id in self.base.graph.ops.keys() {
            if !plan.op_strategies.contains_key(id) {
                return Err(PlanError::IncompletePlan(format!("op `{id}` unassigned")));
            }
        }
        Ok(())
    }
}

impl PlanState {
    /// Movement records of one step for this group, without building the
    /// child states.
    pub fn records(&self, base: &PlanBase, plan: &BasicPlan) -> Result<Vec<StepRec>, PlanError> {
        Ok(self.split(base, plan, false)?.1)
    }

    /// Current box of the output image of an op's frame, optionally with one
    /// variable restricted.
    pub(crate) fn out_image(&self, ctx: &AnalysisCtx, op: &OpState, over: Option<(&str, (i64, i64))>) -> IBox {
        IBox(
            ctx.def
                .output_vars
                .iter()
                .map(|v| match over {
                    Some((ov, r)) if ov == v => r,
                    _ => op.frame[v],
                })
                .collect(),
        )
    }

    /// Concrete accessed region of one input slot under the op's frame with
    /// one variable optionally restricted. Uses the same half-open interval
    /// arithmetic as the symbolic analysis.
    pub(crate) fn required_region(
        &self,
        ctx: &AnalysisCtx,
        op: &OpState,
        param: usize,
        over: Option<(&str, (i64, i64))>,
    ) -> IBox {
        let rank = ctx.accesses[param].len();
        let mut dims = Vec::with_capacity(rank);
        for d in 0..rank {
            let mut lo = i64::MAX;
            let mut hi = i64::MIN;
            for acc in &ctx.accesses[param][d] {
                let (alo, ahi) = match acc {
                    DimAccess::Full(sym) => (0, self.sym_bound(ctx, op, *sym)),
                    DimAccess::Affine(ix) => {
                        let mut l = ix.offset;
                        let mut h = ix.offset;
                        if ix.terms.is_empty() {
                            h += 1;
                        }
                        for (v, c) in &ix.terms {
                            let (vlo, vhi) = match over {
                                Some((ov, r)) if ov == v => r,
                                _ => op.frame[v],
                            };
                            if *c >= 0 {
                                l += c * vlo;
                                h += c * vhi;
                            } else {
                                l += c * vhi - c;
                                h += c * vlo + 1;
                            }
                        }
                        (l, h)
                    }
                };
                lo = lo.min(alo);
                hi = hi.max(ahi);
            }
            dims.push((lo, hi));
        }
        IBox(dims)
    }

    fn sym_bound(&self, ctx: &AnalysisCtx, op: &OpState, sym: usize) -> i64 {
        op.bounds[&ctx.symbols[sym]] as i64
    }

    /// Dimension a split variable addresses on a given slot, with its
    /// coefficient sign, when the access is a pure single-variable form on
    /// that dim. Used only for fast masking decisions, never for cost.
    pub fn frame_extent(&self, op: &OpState, var: &str) -> i64 {
        let (lo, hi) = op.frame[var];
        hi - lo
    }

    /// Split this group `s` ways under `plan`. Returns the child states (if
    /// `build` is set) and all movement records.
    fn split(
        &self,
        base: &PlanBase,
        plan: &BasicPlan,
        build: bool,
    ) -> Result<(Vec<PlanState>, Vec<StepRec>), PlanError> {
        let s = plan.ways;
        let dim_of = |origin: &str| -> usize { plan.tensor_dims[origin] };
        let mut recs: Vec<StepRec> = Vec::new();

        // Post-split boxes of every stored tensor, per part.
        let kept = |t: &StoredTensor, j: usize| -> IBox { t.bx.slice(dim_of(&t.origin), j, s) };

        let mut children: Vec<PlanState> = (0..s)
            .map(|j| {
                let mut c = self.clone();
                c.step = self.step + 1;
                for t in c.tensors.values_mut() {
                    let d = dim_of(&t.origin);
                    t.bx = t.bx.slice(d, j, s);
                }
                c
            })
            .collect();

        for (opid, op) in &self.ops {
            let ctx = base.ctx(&op.def);
            let choice = &plan.op_strategies[opid];
            let var = choice.split_var.as_str();
            let (flo, fhi) = op.frame[var];
            let flen = fhi - flo;
            if flen % s as i64 != 0 {
                return Err(PlanError::NoStrategy(format!(
                    "{opid}: variable {var} extent {flen} not divisible by {s}"
                )));
            }
            let part_range = |j: usize| -> (i64, i64) {
                let w = flen / s as i64;
                (flo + j as i64 * w, flo + (j as i64 + 1) * w)
            };

            // Input side: stage whatever each part needs beyond its slice.
            for (slot, pieces) in op.slots.iter().enumerate() {
                for (pseq, piece_id) in pieces.iter().enumerate() {
                    let piece = &self.tensors[piece_id];
                    for j in 0..s {
                        let req = self.required_region(ctx, op, slot, Some((var, part_range(j))));
                        let need = req.intersect(&piece.bx);
                        if need.is_empty() {
                            continue;
                        }
                        let keep = kept(piece, j);
                        for (bseq, missing) in need.minus(&keep).into_iter().enumerate() {
                            let extra_id =
                                format!("{opid}%s{}.{slot}.{pseq}.{bseq}", self.step);
                            for from in 0..s {
                                if from == j {
                                    continue;
                                }
                                let part = missing.intersect(&kept(piece, from));
                                if part.is_empty() {
                                    continue;
                                }
                                recs.push(StepRec::Fetch {
                                    op: opid.clone(),
                                    slot,
                                    piece: piece_id.clone(),
                                    extra: extra_id.clone(),
                                    to_part: j,
                                    from_part: from,
                                    region: part,
                                });
                            }
                            if build {
                                children[j].tensors.insert(
                                    extra_id.clone(),
                                    StoredTensor {
                                        bx: missing.clone(),
                                        origin: piece.origin.clone(),
                                    },
                                );
                                children[j].ops.get_mut(opid).unwrap().slots[slot]
                                    .push(extra_id.clone());
                            }
                        }
                    }
                }
            }

            // Pending summations redistribute their partials.
            for add in self.adds.iter().filter(|a| &a.op == opid) {
                let d = dim_of(&self.tensors[&add.partial].origin);
                let lhs = &self.tensors[&add.lhs].bx;
                let pbox = &self.tensors[&add.partial].bx;
                for j in 0..s {
                    let req = lhs.slice(d, j, s).intersect(pbox);
                    let keep = pbox.slice(d, j, s);
                    for missing in req.minus(&keep) {
                        for from in 0..s {
                            if from == j {
                                continue;
                            }
                            let part = missing.intersect(&pbox.slice(d, from, s));
                            if part.is_empty() {
                                continue;
                            }
                            recs.push(StepRec::AddFetch {
                                op: opid.clone(),
                                partial: add.partial.clone(),
                                to_part: j,
                                from_part: from,
                                region: part,
                            });
                        }
                    }
                }
            }

            // Output side.
            let out = &self.tensors[&op.out_target];
            let out_dim = dim_of(&out.origin);
            match choice.kind {
                ChoiceKind::Concat { .. } => {
                    for j in 0..s {
                        let produced = self.out_image(ctx, op, Some((var, part_range(j))));
                        for to in 0..s {
                            if to == j {
                                continue;
                            }
                            let owned = out.bx.slice(out_dim, to, s);
                            let ship = produced.intersect(&owned);
                            if !ship.is_empty() {
                                recs.push(StepRec::OutShip {
                                    op: opid.clone(),
                                    target: op.out_target.clone(),
                                    from_part: j,
                                    to_part: to,
                                    region: ship,
                                });
                            }
                        }
                    }
                    if build {
                        for (j, c) in children.iter_mut().enumerate() {
                            let o = c.ops.get_mut(opid).unwrap();
                            let r = part_range(j);
                            o.frame.insert(var.to_string(), r);
                        }
                    }
                }
                ChoiceKind::Reduce { .. } => {
                    // Every part computes a full-frame partial; the reduction
                    // is spread: part `to` combines everyone's partials over
                    // slice `to` of the partial box and holds the result.
                    let pbox = self.out_image(ctx, op, None);
                    let partial_id = format!("{opid}%p{}", self.step);
                    for to in 0..s {
                        let region = pbox.slice(out_dim, to, s);
                        if region.is_empty() {
                            continue;
                        }
                        for from in 0..s {
                            if from == to {
                                continue;
                            }
                            recs.push(StepRec::ReduceSend {
                                op: opid.clone(),
                                partial: partial_id.clone(),
                                from_part: from,
                                to_part: to,
                                region: region.clone(),
                            });
                        }
                    }
                    if build {
                        for (j, c) in children.iter_mut().enumerate() {
                            let o = c.ops.get_mut(opid).unwrap();
                            o.frame.insert(var.to_string(), part_range(j));
                            o.out_target = partial_id.clone();
                            c.tensors.insert(
                                partial_id.clone(),
                                StoredTensor {
                                    bx: pbox.slice(out_dim, j, s),
                                    origin: out.origin.clone(),
                                },
                            );
                            c.adds.push(AddNode {
                                op: opid.clone(),
                                lhs: op.out_target.clone(),
                                partial: partial_id.clone(),
                            });
                        }
                    }
                }
            }
        }
        if !build {
            children.clear();
        }
        Ok((children, recs))
    }
}
