//! Reference interpreter for operator descriptions.
//!
//! Descriptions are meant for analysis, not execution; this interpreter
//! exists so tests can check partitioning decisions against ground truth.
//! Values are `i64` and division truncates, which keeps every reducer exact
//! on integer fixtures.

use crate::error::AnalysisError;
use crate::geom::IBox;
use crate::interval::AnalysisCtx;
use crate::tdl::{ArithOp, Expr, OpaqueArg, Rat, Reducer};
use std::collections::{BTreeMap, HashMap};

/// A dense integer tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub shape: Vec<u64>,
    pub data: Vec<i64>,
}

impl Grid {
    pub fn new(shape: Vec<u64>, fill: i64) -> Self {
        let n: u64 = shape.iter().product();
        Grid {
            shape,
            data: vec![fill; n as usize],
        }
    }

    pub fn from_fn(shape: Vec<u64>, mut f: impl FnMut(&[i64]) -> i64) -> Self {
        let mut g = Grid::new(shape.clone(), 0);
        for p in IBox::full(&shape).points() {
            let v = f(&p);
            g.set(&p, v);
        }
        g
    }

    fn offset(&self, idx: &[i64]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i >= 0 && (i as u64) < self.shape[d], "index out of range");
            off = off * self.shape[d] as usize + i as usize;
        }
        off
    }

    pub fn get(&self, idx: &[i64]) -> i64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[i64], v: i64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }
}

/// A grid positioned inside a larger coordinate space.
#[derive(Debug, Clone)]
pub struct View {
    pub bx: IBox,
    pub grid: Grid,
}

impl View {
    pub fn new(bx: IBox) -> Self {
        let shape = bx.extents();
        View {
            grid: Grid::new(shape, 0),
            bx,
        }
    }

    pub fn whole(grid: Grid) -> Self {
        View {
            bx: IBox::full(&grid.shape),
            grid,
        }
    }

    pub fn get(&self, global: &[i64]) -> Result<i64, String> {
        if !self.bx.contains_point(global) {
            return Err(format!("read at {global:?} outside staged region {:?}", self.bx));
        }
        let local: Vec<i64> = global
            .iter()
            .zip(&self.bx.0)
            .map(|(&g, &(lo, _))| g - lo)
            .collect();
        Ok(self.grid.get(&local))
    }

    pub fn set(&mut self, global: &[i64], v: i64) {
        assert!(self.bx.contains_point(global));
        let local: Vec<i64> = global
            .iter()
            .zip(&self.bx.0)
            .map(|(&g, &(lo, _))| g - lo)
            .collect();
        self.grid.set(&local, v);
    }

    /// Copy `region` out of this view into a fresh view.
    pub fn extract(&self, region: &IBox) -> Result<View, String> {
        let mut out = View::new(region.clone());
        for p in region.points() {
            let v = self.get(&p)?;
            out.set(&p, v);
        }
        Ok(out)
    }

    /// Paste every point of `src` into this view.
    pub fn paste(&mut self, src: &View) {
        for p in src.bx.points() {
            let v = src.get(&p).expect("source covers its own box");
            self.set(&p, v);
        }
    }
}

/// Implementations for opaque functions, supplied by the caller.
#[derive(Default)]
pub struct OpaqueRegistry {
    fns: BTreeMap<String, Box<dyn Fn(&Grid) -> Grid>>,
}

impl OpaqueRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, f: impl Fn(&Grid) -> Grid + 'static) {
        self.fns.insert(name.to_string(), Box::new(f));
    }

    fn call(&self, name: &str, input: &Grid) -> Result<Grid, String> {
        let f = self
            .fns
            .get(name)
            .ok_or_else(|| format!("no implementation registered for opaque `{name}`"))?;
        Ok(f(input))
    }
}

fn apply_reducer(r: Reducer, acc: i64, v: i64) -> i64 {
    match r {
        Reducer::Sum => acc + v,
        Reducer::Max => acc.max(v),
        Reducer::Min => acc.min(v),
        Reducer::Prod => acc * v,
    }
}

fn rat_int(c: Rat) -> Result<i64, String> {
    if c.is_integer() {
        Ok(*c.numer())
    } else {
        Err(format!("non-integral constant {c} in integer interpretation"))
    }
}

/// Evaluate one operator over `out_box` of its output space, with reduction
/// variables restricted to `reduce_ranges` (defaulting to their full bound).
/// Inputs are views positioned in each parameter's coordinate space.
pub fn eval_region(
    ctx: &AnalysisCtx,
    bindings: &BTreeMap<String, u64>,
    inputs: &[&View],
    out_box: &IBox,
    reduce_ranges: &BTreeMap<String, (i64, i64)>,
    reg: &OpaqueRegistry,
) -> Result<View, String> {
    let def = &ctx.def;
    assert_eq!(inputs.len(), def.params.len());
    assert_eq!(out_box.rank(), def.output_vars.len());
    let mut out = View::new(out_box.clone());
    let pidx: BTreeMap<&str, usize> = def
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect();
    let mut opaque_memo: HashMap<(String, Vec<i64>), Grid> = HashMap::new();

    let red_range = |v: &str| -> (i64, i64) {
        reduce_ranges.get(v).copied().unwrap_or_else(|| {
            let b = bindings[&format!("X_{v}")];
            (0, b as i64)
        })
    };

    for p in out_box.points() {
        let mut env: BTreeMap<&str, i64> = BTreeMap::new();
        for (d, v) in def.output_vars.iter().enumerate() {
            env.insert(v, p[d]);
        }
        let val = eval_expr(
            &def.body,
            &mut env,
            inputs,
            &pidx,
            &red_range,
            reg,
            &mut opaque_memo,
        )?;
        out.set(&p, val);
    }
    Ok(out)
}

fn eval_expr<'a>(
    e: &'a Expr,
    env: &mut BTreeMap<&'a str, i64>,
    inputs: &[&View],
    pidx: &BTreeMap<&str, usize>,
    red_range: &dyn Fn(&str) -> (i64, i64),
    reg: &OpaqueRegistry,
    memo: &mut HashMap<(String, Vec<i64>), Grid>,
) -> Result<i64, String> {
    Ok(match e {
        Expr::Const(c) => rat_int(*c)?,
        Expr::Var(v) => *env
            .get(v.as_str())
            .ok_or_else(|| format!("unbound variable {v}"))?,
        Expr::Access { tensor, indices } => {
            let view = inputs[pidx[tensor.as_str()]];
            let coords: Vec<i64> = indices.iter().map(|ix| eval_index(ix, env)).collect();
            view.get(&coords)?
        }
        Expr::Arith(op, a, b) => {
            let x = eval_expr(a, env, inputs, pidx, red_range, reg, memo)?;
            let y = eval_expr(b, env, inputs, pidx, red_range, reg, memo)?;
            match op {
                ArithOp::Add => x + y,
                ArithOp::Sub => x - y,
                ArithOp::Mul => x * y,
                ArithOp::Div => {
                    if y == 0 {
                        return Err("division by zero".to_string());
                    }
                    x / y
                }
            }
        }
        Expr::Reduce(r, vars, inner) => {
            let ranges: Vec<(i64, i64)> = vars.iter().map(|v| red_range(v)).collect();
            let bx = IBox(ranges);
            if bx.is_empty() {
                return Err("empty reduction range".to_string());
            }
            let mut acc: Option<i64> = None;
            for pt in bx.points() {
                for (d, v) in vars.iter().enumerate() {
                    env.insert(v, pt[d]);
                }
                let val = eval_expr(inner, env, inputs, pidx, red_range, reg, memo)?;
                acc = Some(match acc {
                    None => val,
                    Some(a) => apply_reducer(*r, a, val),
                });
            }
            for v in vars {
                env.remove(v.as_str());
            }
            acc.unwrap()
        }
        Expr::Opaque(oc) => {
            let view = inputs[pidx[oc.tensor.as_str()]];
            let mut fixed = Vec::new();
            for a in &oc.args {
                if let OpaqueArg::Index(ix) = a {
                    fixed.push(eval_index(ix, env));
                }
            }
            let key = (format!("{}#{}", oc.func, oc.tensor), fixed.clone());
            if !memo.contains_key(&key) {
                // Extract the sliced sub-grid in slice-dim order.
                let mut region = Vec::new();
                let mut fi = 0;
                for (d, a) in oc.args.iter().enumerate() {
                    match a {
                        OpaqueArg::Index(_) => {
                            let c = fixed[fi];
                            fi += 1;
                            region.push((c, c + 1));
                        }
                        OpaqueArg::Slice => region.push(view.bx.0[d]),
                    }
                }
                let sub = view.extract(&IBox(region.clone()))?;
                let slice_shape: Vec<u64> = oc
                    .args
                    .iter()
                    .enumerate()
                    .filter_map(|(d, a)| {
                        matches!(a, OpaqueArg::Slice).then(|| (region[d].1 - region[d].0) as u64)
                    })
                    .collect();
                let mut packed = Grid::new(slice_shape.clone(), 0);
                let slice_dims: Vec<usize> = oc
                    .args
                    .iter()
                    .enumerate()
                    .filter_map(|(d, a)| matches!(a, OpaqueArg::Slice).then_some(d))
                    .collect();
                for pt in sub.bx.points() {
                    let local: Vec<i64> = slice_dims
                        .iter()
                        .map(|&d| pt[d] - sub.bx.0[d].0)
                        .collect();
                    packed.set(&local, sub.get(&pt)?);
                }
                let result = reg.call(&oc.func, &packed)?;
                if result.shape.len() != oc.result_vars.len() {
                    return Err(format!(
                        "opaque `{}` returned rank {} but {} result indices were declared",
                        oc.func,
                        result.shape.len(),
                        oc.result_vars.len()
                    ));
                }
                memo.insert(key.clone(), result);
            }
            let result = &memo[&key];
            let coords: Vec<i64> = oc
                .result_vars
                .iter()
                .map(|v| env[v.as_str()])
                .collect();
            result.get(&coords)
        }
    })
}

fn eval_index(ix: &crate::tdl::IndexExpr, env: &BTreeMap<&str, i64>) -> i64 {
    ix.terms
        .iter()
        .fold(ix.offset, |acc, (v, c)| acc + c * env[v.as_str()])
}

/// Evaluate a whole operator with full ranges.
pub fn eval_full(
    ctx: &AnalysisCtx,
    bindings: &BTreeMap<String, u64>,
    inputs: &[&Grid],
    out_shape: &[u64],
    reg: &OpaqueRegistry,
) -> Result<Grid, String> {
    let views: Vec<View> = inputs.iter().map(|g| View::whole((*g).clone())).collect();
    let refs: Vec<&View> = views.iter().collect();
    let out = eval_region(
        ctx,
        bindings,
        &refs,
        &IBox::full(out_shape),
        &BTreeMap::new(),
        reg,
    )?;
    Ok(out.grid)
}

/// Brute-force the exact set of input coordinates read while computing the
/// output points of `out_box` (reductions over full ranges). Used as the
/// soundness oracle for the interval analysis.
pub fn accessed_coords(
    ctx: &AnalysisCtx,
    bindings: &BTreeMap<String, u64>,
    out_box: &IBox,
) -> Result<Vec<std::collections::BTreeSet<Vec<i64>>>, AnalysisError> {
    let def = &ctx.def;
    let mut sets = vec![std::collections::BTreeSet::new(); def.params.len()];
    let reduce_box = IBox(
        def.reduce_vars
            .iter()
            .map(|v| (0i64, bindings[&format!("X_{v}")] as i64))
            .collect(),
    );
    let pidx: BTreeMap<&str, usize> = def
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect();
    for p in out_box.points() {
        let mut envs = vec![BTreeMap::new()];
        for (d, v) in def.output_vars.iter().enumerate() {
            envs[0].insert(v.clone(), p[d]);
        }
        let base = envs.pop().unwrap();
        let red_pts: Vec<Vec<i64>> = if def.reduce_vars.is_empty() {
            vec![Vec::new()]
        } else {
            reduce_box.points().collect()
        };
        for rp in red_pts {
            let mut env = base.clone();
            for (d, v) in def.reduce_vars.iter().enumerate() {
                env.insert(v.clone(), rp[d]);
            }
            let env_ref: BTreeMap<&str, i64> =
                env.iter().map(|(k, v)| (k.as_str(), *v)).collect();
            def.body.visit_accesses(&mut |u| match u {
                crate::tdl::TensorUse::Plain { tensor, indices } => {
                    let coords: Vec<i64> =
                        indices.iter().map(|ix| eval_index(ix, &env_ref)).collect();
                    sets[pidx[tensor]].insert(coords);
                }
                crate::tdl::TensorUse::Opaque(oc) => {
                    let p = pidx[oc.tensor.as_str()];
                    let mut ranges = Vec::new();
                    for (d, a) in oc.args.iter().enumerate() {
                        match a {
                            OpaqueArg::Index(ix) => {
                                let c = eval_index(ix, &env_ref);
                                ranges.push((c, c + 1));
                            }
                            OpaqueArg::Slice => {
                                let b = bindings[&ctx.symbols[match &ctx.accesses[p][d][..] {
                                    [crate::interval::DimAccess::Full(s)] => *s,
                                    _ => unreachable!("slice dim has a full access"),
                                }]];
                                ranges.push((0, b as i64));
                            }
                        }
                    }
                    for pt in IBox(ranges).points() {
                        sets[p].insert(pt);
                    }
                }
            });
        }
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::solve_bindings;
    use crate::tdl::parse_tdl;

    #[test]
    fn matmul_matches_hand_computation() {
        let prog = parse_tdl("def matmul(A(2), B(2)) -> lambda i,j: reduce(Sum; k; A[i,k]*B[k,j])").unwrap();
        let ctx = AnalysisCtx::new(&prog.defs[0]);
        let a = Grid::from_fn(vec![2, 3], |p| p[0] * 3 + p[1]);
        let b = Grid::from_fn(vec![3, 2], |p| p[0] * 2 + p[1] + 1);
        let bindings = solve_bindings(&ctx, &[&a.shape, &b.shape], &[2, 2]).unwrap();
        let out = eval_full(&ctx, &bindings, &[&a, &b], &[2, 2], &OpaqueRegistry::new()).unwrap();
        // A = [[0,1,2],[3,4,5]], B = [[1,2],[3,4],[5,6]]
        assert_eq!(out.data, vec![13, 16, 40, 52]);
    }

    #[test]
    fn opaque_region_evaluation() {
        let prog = parse_tdl("def bc(M(3)) -> lambda b,i,j: opaque(RowRev; M[b,:,:])[i,j]").unwrap();
        let ctx = AnalysisCtx::new(&prog.defs[0]);
        let m = Grid::from_fn(vec![2, 2, 2], |p| p[0] * 100 + p[1] * 10 + p[2]);
        let mut reg = OpaqueRegistry::new();
        reg.register("RowRev", |g: &Grid| {
            let rows = g.shape[0] as i64;
            Grid::from_fn(g.shape.clone(), |p| g.get(&[rows - 1 - p[0], p[1]]))
        });
        let bindings = solve_bindings(&ctx, &[&m.shape], &[2, 2, 2]).unwrap();
        let out = eval_full(&ctx, &bindings, &[&m], &[2, 2, 2], &reg).unwrap();
        assert_eq!(out.get(&[0, 0, 1]), 11);
        assert_eq!(out.get(&[1, 1, 0]), 100);
    }

    #[test]
    fn reads_outside_staged_region_fail() {
        let prog = parse_tdl("def shift(A(1)) -> lambda i: A[i+2]").unwrap();
        let ctx = AnalysisCtx::new(&prog.defs[0]);
        let view = View::whole(Grid::new(vec![4], 1));
        let mut bindings = BTreeMap::new();
        bindings.insert("X_i".to_string(), 4u64);
        let r = eval_region(
            &ctx,
            &bindings,
            &[&view],
            &IBox(vec![(0, 4)]),
            &BTreeMap::new(),
            &OpaqueRegistry::new(),
        );
        assert!(r.is_err());
    }
}
