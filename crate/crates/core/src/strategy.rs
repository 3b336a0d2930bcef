//! Derivation of the basic partition strategies of a single operator.
//!
//! Each strategy splits one index variable `s` ways. Splitting an output
//! variable concatenates the per-worker outputs along that dimension;
//! splitting a reduction variable leaves each worker with a full-size partial
//! output that is combined with the operator's reducer.

use crate::error::{AnalysisError, StrategyError};
use crate::interval::{eval_access, AnalysisCtx, SymInterval};
use crate::tdl::{OperatorDef, Reducer};
use num::integer::binomial;
use std::collections::BTreeMap;

/// The input region one worker reads along one tensor dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum DimRegion {
    Whole,
    Slice { part: usize, of: usize },
    Halo(SymInterval),
}

/// Per-dimension regions of one tensor for one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub dims: Vec<DimRegion>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StrategyKind {
    /// Worker outputs tile the output tensor along this output dimension.
    Concat { dim: usize },
    /// Worker outputs are full-size partials combined element-wise.
    Reduce(Reducer),
}

/// One split-and-combine option for an operator.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionStrategy {
    pub op: String,
    pub split_var: String,
    pub ways: usize,
    pub kind: StrategyKind,
    /// Per input tensor, per worker.
    pub inputs: Vec<(String, Vec<RegionSpec>)>,
    /// Per worker.
    pub output: Vec<RegionSpec>,
}

/// Multiset count of ways to distribute `m` binary splits over `n` dims.
pub fn count_nd_partitions(rank: u64, splits: u64) -> u128 {
    binomial((rank + splits - 1) as u128, splits as u128)
}

/// Enumerate all basic strategies of `def` for an `s`-way split: one per
/// output variable and one per reduction variable, excluding variables bound
/// to opaque results.
pub fn discover_strategies(def: &OperatorDef, ways: usize) -> Result<Vec<PartitionStrategy>, StrategyError> {
    assert!(ways >= 2, "a split needs at least two workers");
    let ctx = AnalysisCtx::new(def);
    discover_with_ctx(&ctx, ways)
}

pub fn discover_with_ctx(ctx: &AnalysisCtx, ways: usize) -> Result<Vec<PartitionStrategy>, StrategyError> {
    let def = &ctx.def;
    let blocked = blocked_vars(def);
    let full = eval_access(ctx, &BTreeMap::new());
    let mut out = Vec::new();
    for (d, v) in def.output_vars.iter().enumerate() {
        if blocked.contains(v) {
            continue;
        }
        out.push(build_strategy(ctx, &full, v, StrategyKind::Concat { dim: d }, ways));
    }
    for v in &def.reduce_vars {
        if blocked.contains(v) {
            continue;
        }
        let kind = StrategyKind::Reduce(def.reducer.expect("reduce var implies reducer"));
        out.push(build_strategy(ctx, &full, v, kind, ways));
    }
    if out.is_empty() {
        return Err(StrategyError::NoStrategy(def.name.clone()));
    }
    Ok(out)
}

/// Variables appearing as opaque result indices cannot be split.
pub fn blocked_vars(def: &OperatorDef) -> Vec<String> {
    let mut blocked = Vec::new();
    def.body.visit_accesses(&mut |u| {
        if let crate::tdl::TensorUse::Opaque(oc) = u {
            for v in &oc.result_vars {
                if !blocked.contains(v) {
                    blocked.push(v.clone());
                }
            }
        }
    });
    blocked
}

fn build_strategy(
    ctx: &AnalysisCtx,
    full: &crate::interval::AccessMap,
    var: &str,
    kind: StrategyKind,
    ways: usize,
) -> PartitionStrategy {
    let def = &ctx.def;
    let n = ctx.nsyms();
    let sym = ctx.var_symbol(var).expect("declared var");
    let zero = crate::tdl::Rat::from_integer(0);

    let mut inputs: Vec<(String, Vec<RegionSpec>)> = def
        .params
        .iter()
        .map(|p| (p.name.clone(), Vec::with_capacity(ways)))
        .collect();
    for j in 0..ways {
        let mut init = BTreeMap::new();
        init.insert(var.to_string(), SymInterval::part(n, sym, j, ways));
        let am = eval_access(ctx, &init);
        for (p, (_, dims)) in am.tensors.iter().enumerate() {
            let mut regions = Vec::with_capacity(dims.len());
            for (d, iv) in dims.iter().enumerate() {
                let f = &full.tensors[p].1[d];
                let whole_from_zero = f.lo.coeffs.iter().all(|&c| c == zero) && f.lo.constant == zero;
                let region = if iv == f && whole_from_zero {
                    DimRegion::Whole
                } else if whole_from_zero && *iv == slice_of(f, j, ways) {
                    DimRegion::Slice { part: j, of: ways }
                } else {
                    DimRegion::Halo(iv.clone())
                };
                regions.push(region);
            }
            inputs[p].1.push(RegionSpec { dims: regions });
        }
    }

    let out_rank = def.output_vars.len();
    let output = (0..ways)
        .map(|j| RegionSpec {
            dims: (0..out_rank)
                .map(|d| match kind {
                    StrategyKind::Concat { dim } if dim == d => DimRegion::Slice { part: j, of: ways },
                    _ => DimRegion::Whole,
                })
                .collect(),
        })
        .collect();

    PartitionStrategy {
        op: def.name.clone(),
        split_var: var.to_string(),
        ways,
        kind,
        inputs,
        output,
    }
}

/// Part `j` of an even `s`-way tiling of the full extent `[0, f.hi)`.
fn slice_of(f: &SymInterval, j: usize, s: usize) -> SymInterval {
    SymInterval {
        lo: f.hi.scale(crate::tdl::Rat::new(j as i64, s as i64)),
        hi: f.hi.scale(crate::tdl::Rat::new(j as i64 + 1, s as i64)),
    }
}

/// Exact element count of `required ∩ stored` for one tensor under concrete
/// dims: per-dimension range intersection, product across dimensions.
///
/// Halo regions must be constant (already concretized forms); symbolic halos
/// report `UnboundSymbol`.
pub fn overlap_fraction(
    required: &RegionSpec,
    stored: &RegionSpec,
    shape: &[u64],
) -> Result<u64, AnalysisError> {
    assert_eq!(required.dims.len(), shape.len());
    assert_eq!(stored.dims.len(), shape.len());
    let mut total: u64 = 1;
    for d in 0..shape.len() {
        let a = dim_range(&required.dims[d], shape[d])?;
        let b = dim_range(&stored.dims[d], shape[d])?;
        let lo = a.0.max(b.0);
        let hi = a.1.min(b.1);
        total *= hi.saturating_sub(lo).max(0) as u64;
    }
    Ok(total)
}

fn dim_range(r: &DimRegion, size: u64) -> Result<(i64, i64), AnalysisError> {
    Ok(match r {
        DimRegion::Whole => (0, size as i64),
        DimRegion::Slice { part, of } => (
            part_bound(size, *part, *of),
            part_bound(size, part + 1, *of),
        ),
        DimRegion::Halo(iv) => {
            let all_zero = |f: &crate::interval::AffineForm| {
                f.coeffs.iter().all(|&c| c == crate::tdl::Rat::from_integer(0))
            };
            if !all_zero(&iv.lo) || !all_zero(&iv.hi) {
                return Err(AnalysisError::UnboundSymbol(
                    "halo region with free symbols".to_string(),
                ));
            }
            (
                iv.lo.constant.ceil().to_integer(),
                iv.hi.constant.ceil().to_integer(),
            )
        }
    })
}

/// Boundary `ceil(j * size / of)` of an even tiling.
pub fn part_bound(size: u64, j: usize, of: usize) -> i64 {
    let n = size as i64 * j as i64;
    let d = of as i64;
    (n + d - 1).div_euclid(d)
}

/// JSON rendering of a strategy, per-worker halos rendered as interval
/// strings.
pub fn strategy_to_json(s: &PartitionStrategy, ctx: &AnalysisCtx) -> serde_json::Value {
    use serde_json::{json, Value};
    let region_json = |specs: &[RegionSpec]| -> Value {
        let rank = specs[0].dims.len();
        let dims: Vec<Value> = (0..rank)
            .map(|d| {
                let all_whole = specs.iter().all(|r| r.dims[d] == DimRegion::Whole);
                if all_whole {
                    return json!("whole");
                }
                let all_slice = specs
                    .iter()
                    .enumerate()
                    .all(|(j, r)| matches!(r.dims[d], DimRegion::Slice { part, of } if part == j && of == specs.len()));
                if all_slice {
                    return json!({ "slice": { "of": specs.len() } });
                }
                let halos: Vec<String> = specs
                    .iter()
                    .map(|r| match &r.dims[d] {
                        DimRegion::Whole => "whole".to_string(),
                        DimRegion::Slice { part, of } => format!("slice {part}/{of}"),
                        DimRegion::Halo(iv) => format!(
                            "[{}, {})",
                            iv.lo.display(&ctx.symbols),
                            iv.hi.display(&ctx.symbols)
                        ),
                    })
                    .collect();
                json!({ "halo": halos })
            })
            .collect();
        Value::Array(dims)
    };
    let kind = match &s.kind {
        StrategyKind::Concat { dim } => json!({ "concat": { "dim": dim } }),
        StrategyKind::Reduce(r) => json!({ "reduce": { "reducer": r.to_string() } }),
    };
    json!({
        "op": s.op,
        "split_dim": s.split_var,
        "ways": s.ways,
        "kind": kind,
        "inputs": s.inputs.iter().map(|(t, specs)| json!({
            "tensor": t,
            "dims": region_json(specs),
        })).collect::<Vec<_>>(),
        "output": { "dims": region_json(&s.output) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdl::parse_tdl;

    fn def(src: &str) -> OperatorDef {
        parse_tdl(src).unwrap().defs.remove(0)
    }

    const CONV1D: &str = "def conv1d(data(3), filters(3)) -> lambda b,co,x: reduce(Sum; ci,dx; data[b,ci,x+dx]*filters[ci,co,dx])";

    #[test]
    fn conv1d_has_five_strategies() {
        let d = def(CONV1D);
        let ss = discover_strategies(&d, 2).unwrap();
        let vars: Vec<&str> = ss.iter().map(|s| s.split_var.as_str()).collect();
        assert_eq!(vars, ["b", "co", "x", "ci", "dx"]);
    }

    #[test]
    fn conv1d_batch_split_matches_figure() {
        let d = def(CONV1D);
        let ss = discover_strategies(&d, 2).unwrap();
        let b = &ss[0];
        assert_eq!(b.kind, StrategyKind::Concat { dim: 0 });
        for j in 0..2 {
            let data = &b.inputs[0].1[j];
            assert_eq!(data.dims[0], DimRegion::Slice { part: j, of: 2 });
            assert_eq!(data.dims[1], DimRegion::Whole);
            let filters = &b.inputs[1].1[j];
            assert!(filters.dims.iter().all(|r| *r == DimRegion::Whole));
        }
    }

    #[test]
    fn conv1d_channel_split_reduces() {
        let d = def(CONV1D);
        let ss = discover_strategies(&d, 2).unwrap();
        let ci = ss.iter().find(|s| s.split_var == "ci").unwrap();
        assert_eq!(ci.kind, StrategyKind::Reduce(Reducer::Sum));
        for j in 0..2 {
            assert_eq!(ci.inputs[0].1[j].dims[1], DimRegion::Slice { part: j, of: 2 });
            assert_eq!(ci.inputs[1].1[j].dims[0], DimRegion::Slice { part: j, of: 2 });
            assert!(ci.output[j].dims.iter().all(|r| *r == DimRegion::Whole));
        }
    }

    #[test]
    fn conv1d_pixel_split_has_halo() {
        let d = def(CONV1D);
        let ctx = AnalysisCtx::new(&d);
        let ss = discover_strategies(&d, 2).unwrap();
        let x = ss.iter().find(|s| s.split_var == "x").unwrap();
        for j in 0..2 {
            match &x.inputs[0].1[j].dims[2] {
                DimRegion::Halo(iv) => {
                    // [j/2 * X_x, (j+1)/2 * X_x + X_dx)
                    let xs = ctx.var_symbol("x").unwrap();
                    let dxs = ctx.var_symbol("dx").unwrap();
                    assert_eq!(iv.lo.coeffs[xs], crate::tdl::Rat::new(j as i64, 2));
                    assert_eq!(iv.hi.coeffs[xs], crate::tdl::Rat::new(j as i64 + 1, 2));
                    assert_eq!(iv.hi.coeffs[dxs], crate::tdl::Rat::from_integer(1));
                }
                other => panic!("expected halo, got {other:?}"),
            }
        }
    }

    #[test]
    fn matmul_has_exactly_three_strategies() {
        let d = def("def matmul(A(2), B(2)) -> lambda i,j: reduce(Sum; k; A[i,k]*B[k,j])");
        let ss = discover_strategies(&d, 2).unwrap();
        assert_eq!(ss.len(), 3);
        assert_eq!(ss[0].kind, StrategyKind::Concat { dim: 0 });
        assert_eq!(ss[1].kind, StrategyKind::Concat { dim: 1 });
        assert_eq!(ss[2].kind, StrategyKind::Reduce(Reducer::Sum));
    }

    #[test]
    fn elementwise_inputs_track_output_slices() {
        let d = def("def add(A(2), B(2)) -> lambda i,j: A[i,j]+B[i,j]");
        let ss = discover_strategies(&d, 4).unwrap();
        for (dim, s) in ss.iter().enumerate() {
            assert_eq!(s.kind, StrategyKind::Concat { dim });
            for j in 0..4 {
                for (_, specs) in &s.inputs {
                    assert_eq!(specs[j].dims[dim], DimRegion::Slice { part: j, of: 4 });
                }
            }
        }
    }

    #[test]
    fn opaque_without_batch_dim_has_no_strategy() {
        let d = def("def chol(M(2)) -> lambda i,j: opaque(Cholesky; M[:,:])[i,j]");
        let e = discover_strategies(&d, 2).unwrap_err();
        assert!(matches!(e, StrategyError::NoStrategy(_)));
    }

    #[test]
    fn opaque_batch_dims_discovered() {
        let d = def("def bc(M(3)) -> lambda b,i,j: opaque(Cholesky; M[b,:,:])[i,j]");
        let ss = discover_strategies(&d, 2).unwrap();
        assert_eq!(ss.len(), 1);
        assert_eq!(ss[0].split_var, "b");
        assert_eq!(ss[0].inputs[0].1[1].dims[0], DimRegion::Slice { part: 1, of: 2 });
        assert_eq!(ss[0].inputs[0].1[1].dims[1], DimRegion::Whole);
    }

    #[test]
    fn nd_partition_counts() {
        assert_eq!(count_nd_partitions(4, 3), 20);
        assert_eq!(count_nd_partitions(1, 3), 1);
        // Frozen from enumerating {2 splits on d0}, {1+1}, {2 on d1}.
        assert_eq!(count_nd_partitions(2, 2), 3);
    }

    #[test]
    fn overlap_counts() {
        let whole = |rank: usize| RegionSpec {
            dims: vec![DimRegion::Whole; rank],
        };
        let mut stored = whole(2);
        stored.dims[0] = DimRegion::Slice { part: 0, of: 2 };
        assert_eq!(overlap_fraction(&whole(2), &stored, &[8, 8]).unwrap(), 32);

        let mut required = whole(2);
        required.dims[0] = DimRegion::Slice { part: 0, of: 2 };
        let mut stored = whole(2);
        stored.dims[1] = DimRegion::Slice { part: 0, of: 2 };
        // Frozen: quarter block of an 8x8, verified by index enumeration.
        assert_eq!(overlap_fraction(&required, &stored, &[8, 8]).unwrap(), 16);

        let n = 0;
        let halo = RegionSpec {
            dims: vec![DimRegion::Halo(SymInterval {
                lo: crate::interval::AffineForm::constant(n, crate::tdl::Rat::from_integer(0)),
                hi: crate::interval::AffineForm::constant(n, crate::tdl::Rat::from_integer(6)),
            })],
        };
        let stored = RegionSpec {
            dims: vec![DimRegion::Slice { part: 1, of: 2 }],
        };
        // Frozen: [0,6) ∩ [4,8) = [4,6).
        assert_eq!(overlap_fraction(&halo, &stored, &[8]).unwrap(), 2);
    }

    #[test]
    fn uneven_slices_tile_exactly() {
        for size in [5u64, 7, 9] {
            for of in [2usize, 3, 4] {
                let mut total = 0;
                for part in 0..of {
                    let lo = part_bound(size, part, of);
                    let hi = part_bound(size, part + 1, of);
                    assert!(lo <= hi);
                    total += hi - lo;
                }
                assert_eq!(total as u64, size);
            }
        }
    }
}
