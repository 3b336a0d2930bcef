//! Symbolic interval analysis over operator descriptions.
//!
//! Index variables range over half-open intervals whose bounds are affine
//! forms in the symbolic extents of the operator's dimensions. Executing an
//! operator body over such intervals yields, per input dimension, the affine
//! interval of accessed coordinates. Lower and upper bounds carry separate
//! constants so that split initializations (a worker's half-range) compose
//! with constant shifts without losing precision. All arithmetic is exact
//! rational arithmetic.

use crate::error::AnalysisError;
use crate::tdl::{OpaqueArg, OperatorDef, Rat, TensorUse};
use std::collections::BTreeMap;
use std::fmt;

/// An affine form over the symbolic extents of an analysis context:
/// `sum(coeffs[i] * X_i) + constant`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffineForm {
    pub coeffs: Vec<Rat>,
    pub constant: Rat,
}

impl AffineForm {
    pub fn constant(n: usize, c: Rat) -> Self {
        AffineForm {
            coeffs: vec![Rat::from_integer(0); n],
            constant: c,
        }
    }

    pub fn unit(n: usize, sym: usize, scale: Rat) -> Self {
        let mut f = Self::constant(n, Rat::from_integer(0));
        f.coeffs[sym] = scale;
        f
    }

    fn zip(&self, other: &Self, f: impl Fn(Rat, Rat) -> Rat) -> Self {
        AffineForm {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            constant: f(self.constant, other.constant),
        }
    }

    pub fn scale(&self, k: Rat) -> Self {
        AffineForm {
            coeffs: self.coeffs.iter().map(|&c| c * k).collect(),
            constant: self.constant * k,
        }
    }

    pub fn shift(&self, k: Rat) -> Self {
        let mut f = self.clone();
        f.constant += k;
        f
    }

    /// Evaluate under concrete symbol bounds.
    pub fn eval(&self, bounds: &[Rat]) -> Rat {
        self.coeffs
            .iter()
            .zip(bounds)
            .fold(self.constant, |acc, (&c, &b)| acc + c * b)
    }
}

/// A half-open symbolic interval `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymInterval {
    pub lo: AffineForm,
    pub hi: AffineForm,
}

impl SymInterval {
    /// The full range `[0, X_sym)`.
    pub fn full(n: usize, sym: usize) -> Self {
        SymInterval {
            lo: AffineForm::constant(n, Rat::from_integer(0)),
            hi: AffineForm::unit(n, sym, Rat::from_integer(1)),
        }
    }

    /// Part `j` of an `s`-way even split of `[0, X_sym)`.
    pub fn part(n: usize, sym: usize, j: usize, s: usize) -> Self {
        SymInterval {
            lo: AffineForm::unit(n, sym, Rat::new(j as i64, s as i64)),
            hi: AffineForm::unit(n, sym, Rat::new(j as i64 + 1, s as i64)),
        }
    }

    pub fn add_const(&self, k: Rat) -> Self {
        SymInterval {
            lo: self.lo.shift(k),
            hi: self.hi.shift(k),
        }
    }

    /// Multiply by a constant. Negative constants reverse the interval; the
    /// half-open convention over integer points requires the `-k` / `+1`
    /// adjustments on the swapped bounds.
    pub fn mul_const(&self, k: Rat) -> Self {
        let zero = Rat::from_integer(0);
        if k >= zero {
            SymInterval {
                lo: self.lo.scale(k),
                hi: self.hi.scale(k),
            }
        } else {
            SymInterval {
                lo: self.hi.scale(k).shift(-k),
                hi: self.lo.scale(k).shift(Rat::from_integer(1)),
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        SymInterval {
            lo: self.lo.zip(&other.lo, |a, b| a + b),
            hi: self.hi.zip(&other.hi, |a, b| a + b),
        }
    }

    /// Minkowski difference over half-open integer intervals.
    pub fn sub(&self, other: &Self) -> Self {
        SymInterval {
            lo: self.lo.zip(&other.hi, |a, b| a - b).shift(Rat::from_integer(1)),
            hi: self.hi.zip(&other.lo, |a, b| a - b),
        }
    }

    /// Coefficient-wise hull of two intervals (exact for non-negative symbol
    /// bounds).
    pub fn join(&self, other: &Self) -> Self {
        SymInterval {
            lo: self.lo.zip(&other.lo, Rat::min),
            hi: self.hi.zip(&other.hi, Rat::max),
        }
    }
}

impl AffineForm {
    pub fn display<'a>(&'a self, names: &'a [String]) -> AffineDisplay<'a> {
        AffineDisplay { form: self, names }
    }
}

pub struct AffineDisplay<'a> {
    form: &'a AffineForm,
    names: &'a [String],
}

impl fmt::Display for AffineDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let zero = Rat::from_integer(0);
        let mut wrote = false;
        for (i, &c) in self.form.coeffs.iter().enumerate() {
            if c == zero {
                continue;
            }
            if wrote {
                write!(f, " + ")?;
            }
            if c == Rat::from_integer(1) {
                write!(f, "{}", self.names[i])?;
            } else {
                write!(f, "{}*{}", crate::tdl::fmt_rat(c), self.names[i])?;
            }
            wrote = true;
        }
        if self.form.constant != zero || !wrote {
            if wrote {
                write!(f, " + ")?;
            }
            write!(f, "{}", crate::tdl::fmt_rat(self.form.constant))?;
        }
        Ok(())
    }
}

/// Operations supported by the interval arithmetic. Anything else is
/// non-affine and rejected.
pub enum IntervalOp<'a> {
    AddConst(Rat),
    SubConst(Rat),
    MulConst(Rat),
    DivConst(Rat),
    AddInterval(&'a SymInterval),
    SubInterval(&'a SymInterval),
    MulInterval(&'a SymInterval),
    CmpInterval(&'a SymInterval),
}

/// Apply one arithmetic step to an interval.
pub fn interval_arith(op: IntervalOp, i: &SymInterval) -> Result<SymInterval, AnalysisError> {
    match op {
        IntervalOp::AddConst(k) => Ok(i.add_const(k)),
        IntervalOp::SubConst(k) => Ok(i.add_const(-k)),
        IntervalOp::MulConst(k) => Ok(i.mul_const(k)),
        IntervalOp::DivConst(k) => {
            if k == Rat::from_integer(0) {
                return Err(AnalysisError::NonAffine("division by zero"));
            }
            Ok(i.mul_const(Rat::from_integer(1) / k))
        }
        IntervalOp::AddInterval(o) => Ok(i.add(o)),
        IntervalOp::SubInterval(o) => Ok(i.sub(o)),
        IntervalOp::MulInterval(_) => Err(AnalysisError::NonAffine(
            "product of two intervals is not supported",
        )),
        IntervalOp::CmpInterval(_) => Err(AnalysisError::NonAffine(
            "comparison of two intervals is not supported",
        )),
    }
}

/// How one tensor dimension is addressed by the operator body.
#[derive(Debug, Clone, PartialEq)]
pub enum DimAccess {
    /// Affine combination of index variables.
    Affine(crate::tdl::IndexExpr),
    /// Whole dimension (opaque slice or unused); carries its anonymous
    /// extent symbol.
    Full(usize),
}

/// Prepared analysis context for one operator: symbol table plus the access
/// structure of every input dimension.
#[derive(Debug, Clone)]
pub struct AnalysisCtx {
    pub def: OperatorDef,
    /// Symbol display names, `X_<var>` for index vars then `X_<tensor>.<dim>`
    /// for whole-dimension extents.
    pub symbols: Vec<String>,
    var_sym: BTreeMap<String, usize>,
    /// `accesses[param][dim]` lists every way the dimension is addressed.
    pub accesses: Vec<Vec<Vec<DimAccess>>>,
}

impl AnalysisCtx {
    pub fn new(def: &OperatorDef) -> Self {
        let mut symbols = Vec::new();
        let mut var_sym = BTreeMap::new();
        for v in def.output_vars.iter().chain(&def.reduce_vars) {
            var_sym.insert(v.clone(), symbols.len());
            symbols.push(format!("X_{v}"));
        }
        let mut accesses: Vec<Vec<Vec<DimAccess>>> = def
            .params
            .iter()
            .map(|p| vec![Vec::new(); p.rank])
            .collect();
        let pidx: BTreeMap<&str, usize> = def
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect();
        let mut pending_full: Vec<(usize, usize)> = Vec::new();
        def.body.visit_accesses(&mut |u| match u {
            TensorUse::Plain { tensor, indices } => {
                let p = pidx[tensor];
                for (d, ix) in indices.iter().enumerate() {
                    accesses[p][d].push(DimAccess::Affine(ix.clone()));
                }
            }
            TensorUse::Opaque(oc) => {
                let p = pidx[oc.tensor.as_str()];
                for (d, a) in oc.args.iter().enumerate() {
                    match a {
                        OpaqueArg::Index(ix) => accesses[p][d].push(DimAccess::Affine(ix.clone())),
                        OpaqueArg::Slice => pending_full.push((p, d)),
                    }
                }
            }
        });
        // Whole-dimension extents get anonymous symbols, in (param, dim)
        // order; unused dimensions are treated the same way.
        for (p, param) in def.params.iter().enumerate() {
            for d in 0..param.rank {
                let needs_full = pending_full.contains(&(p, d)) || accesses[p][d].is_empty();
                if needs_full {
                    let sym = symbols.len();
                    symbols.push(format!("X_{}.{d}", param.name));
                    accesses[p][d].push(DimAccess::Full(sym));
                }
            }
        }
        AnalysisCtx {
            def: def.clone(),
            symbols,
            var_sym,
            accesses,
        }
    }

    pub fn nsyms(&self) -> usize {
        self.symbols.len()
    }

    pub fn var_symbol(&self, var: &str) -> Option<usize> {
        self.var_sym.get(var).copied()
    }

    /// The interval image of one dimension access under the given variable
    /// intervals.
    fn image(&self, acc: &DimAccess, init: &dyn Fn(&str) -> SymInterval) -> SymInterval {
        let n = self.nsyms();
        match acc {
            DimAccess::Full(sym) => SymInterval::full(n, *sym),
            DimAccess::Affine(ix) => {
                let mut out = SymInterval {
                    lo: AffineForm::constant(n, Rat::from_integer(ix.offset)),
                    hi: AffineForm::constant(n, Rat::from_integer(ix.offset)),
                };
                // A constant index addresses the single point [c, c+1).
                if ix.terms.is_empty() {
                    out.hi = out.hi.shift(Rat::from_integer(1));
                    return out;
                }
                for (v, c) in &ix.terms {
                    let iv = init(v).mul_const(Rat::from_integer(*c));
                    out = out.add(&iv);
                }
                out
            }
        }
    }

    /// Per-dimension hull of all accesses.
    pub fn dim_interval(&self, param: usize, dim: usize, init: &dyn Fn(&str) -> SymInterval) -> SymInterval {
        let entries = &self.accesses[param][dim];
        let mut it = entries.iter();
        let first = self.image(it.next().expect("dimension has an access"), init);
        it.fold(first, |acc, e| acc.join(&self.image(e, init)))
    }
}

/// Per input tensor, per dimension: the symbolic interval of accessed
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessMap {
    pub tensors: Vec<(String, Vec<SymInterval>)>,
}

impl AccessMap {
    pub fn get(&self, tensor: &str) -> Option<&[SymInterval]> {
        self.tensors
            .iter()
            .find(|(t, _)| t == tensor)
            .map(|(_, v)| v.as_slice())
    }
}

/// Symbolically execute the operator body: each input dimension's interval is
/// the image of its index expression under `init`. Variables missing from
/// `init` default to their full range `[0, X)`.
pub fn eval_access(ctx: &AnalysisCtx, init: &BTreeMap<String, SymInterval>) -> AccessMap {
    let n = ctx.nsyms();
    let lookup = |v: &str| -> SymInterval {
        init.get(v)
            .cloned()
            .unwrap_or_else(|| SymInterval::full(n, ctx.var_symbol(v).expect("declared var")))
    };
    let tensors = ctx
        .def
        .params
        .iter()
        .enumerate()
        .map(|(p, param)| {
            let dims = (0..param.rank)
                .map(|d| ctx.dim_interval(p, d, &lookup))
                .collect();
            (param.name.clone(), dims)
        })
        .collect();
    AccessMap { tensors }
}

/// Concretize an interval to a half-open integer range by binding every
/// symbol and applying ceiling to both bounds. Empty ranges are permitted.
pub fn concretize(
    ctx: &AnalysisCtx,
    i: &SymInterval,
    bounds: &BTreeMap<String, u64>,
) -> Result<(i64, i64), AnalysisError> {
    let mut vals = Vec::with_capacity(ctx.nsyms());
    for (s, name) in ctx.symbols.iter().enumerate() {
        let needed = i.lo.coeffs[s] != Rat::from_integer(0) || i.hi.coeffs[s] != Rat::from_integer(0);
        match bounds.get(name) {
            Some(&b) => vals.push(Rat::from_integer(b as i64)),
            None if !needed => vals.push(Rat::from_integer(0)),
            None => return Err(AnalysisError::UnboundSymbol(name.clone())),
        }
    }
    let lo = i.lo.eval(&vals).ceil().to_integer();
    let hi = i.hi.eval(&vals).ceil().to_integer();
    Ok((lo, hi))
}

/// Solve concrete symbol bounds for an operator instance from its input and
/// output shapes. Output variables bind directly from the output shape;
/// whole-dimension symbols bind from the input shapes; reduction variable
/// bounds are solved from the requirement that each declared input dimension
/// equals the upper bound of its full-range access image.
pub fn solve_bindings(
    ctx: &AnalysisCtx,
    input_shapes: &[&[u64]],
    output_shape: &[u64],
) -> Result<BTreeMap<String, u64>, String> {
    let n = ctx.nsyms();
    let mut value: Vec<Option<Rat>> = vec![None; n];
    for (i, v) in ctx.def.output_vars.iter().enumerate() {
        let s = ctx.var_symbol(v).unwrap();
        value[s] = Some(Rat::from_integer(output_shape[i] as i64));
    }
    // Upper-bound forms of every input dimension under full ranges.
    let full = eval_access(ctx, &BTreeMap::new());
    let mut equations: Vec<(AffineForm, Rat, String)> = Vec::new();
    for (p, (tname, dims)) in full.tensors.iter().enumerate() {
        for (d, iv) in dims.iter().enumerate() {
            let size = Rat::from_integer(input_shapes[p][d] as i64);
            equations.push((iv.hi.clone(), size, format!("{tname} dim {d}")));
        }
    }
    // Opaque result variables must match their slice dimension's extent.
    ctx.def.body.visit_accesses(&mut |u| {
        if let TensorUse::Opaque(oc) = u {
            let p = ctx
                .def
                .params
                .iter()
                .position(|q| q.name == oc.tensor)
                .unwrap();
            let slice_dims: Vec<usize> = oc
                .args
                .iter()
                .enumerate()
                .filter_map(|(d, a)| matches!(a, OpaqueArg::Slice).then_some(d))
                .collect();
            for (r, v) in oc.result_vars.iter().enumerate() {
                if r < slice_dims.len() {
                    let s = ctx.var_symbol(v).unwrap();
                    let size = Rat::from_integer(input_shapes[p][slice_dims[r]] as i64);
                    equations.push((
                        AffineForm::unit(n, s, Rat::from_integer(1)),
                        size,
                        format!("{} result dim {r}", oc.tensor),
                    ));
                }
            }
        }
    });

    loop {
        let mut progress = false;
        let mut unresolved = false;
        for (form, rhs, what) in &equations {
            let mut acc = form.constant;
            let mut unknown: Option<(usize, Rat)> = None;
            let mut too_many = false;
            for (s, &c) in form.coeffs.iter().enumerate() {
                if c == Rat::from_integer(0) {
                    continue;
                }
                match value[s] {
                    Some(v) => acc += c * v,
                    None => {
                        if unknown.is_some() {
                            too_many = true;
                        } else {
                            unknown = Some((s, c));
                        }
                    }
                }
            }
            if too_many {
                unresolved = true;
                continue;
            }
            match unknown {
                None => {
                    if acc != *rhs {
                        return Err(format!(
                            "{what}: declared size {} but access image requires {}",
                            rhs, acc
                        ));
                    }
                }
                Some((s, c)) => {
                    let v = (*rhs - acc) / c;
                    if !v.is_integer() || v <= Rat::from_integer(0) {
                        return Err(format!("{what}: inferred extent {v} is not a positive integer"));
                    }
                    value[s] = Some(v);
                    progress = true;
                }
            }
        }
        if !unresolved || !progress {
            if unresolved && !progress {
                return Err("underdetermined extents".to_string());
            }
            if !unresolved {
                break;
            }
        }
    }
    if let Some(s) = value.iter().position(|v| v.is_none()) {
        return Err(format!("extent of {} cannot be inferred", ctx.symbols[s]));
    }

    let bounds: BTreeMap<String, u64> = ctx
        .symbols
        .iter()
        .enumerate()
        .map(|(s, name)| (name.clone(), value[s].unwrap().to_integer() as u64))
        .collect();

    // Accesses must not reach below zero anywhere.
    for (tname, dims) in &full.tensors {
        for (d, iv) in dims.iter().enumerate() {
            let (lo, _) = concretize(ctx, iv, &bounds).map_err(|e| e.to_string())?;
            if lo < 0 {
                return Err(format!("{tname} dim {d}: access image starts at {lo} < 0"));
            }
        }
    }
    Ok(bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdl::parse_tdl;

    fn ctx(src: &str) -> AnalysisCtx {
        AnalysisCtx::new(&parse_tdl(src).unwrap().defs[0])
    }

    fn rat(n: i64) -> Rat {
        Rat::from_integer(n)
    }

    #[test]
    fn shift_two_region() {
        let c = ctx("def shift_two(A(1)) -> lambda i: A[i+2]");
        let mut init = BTreeMap::new();
        init.insert("i".to_string(), SymInterval::part(c.nsyms(), 0, 0, 2));
        let am = eval_access(&c, &init);
        let iv = &am.get("A").unwrap()[0];
        let mut bounds = BTreeMap::new();
        bounds.insert("X_i".to_string(), 10);
        assert_eq!(concretize(&c, iv, &bounds).unwrap(), (2, 7));

        init.insert("i".to_string(), SymInterval::part(c.nsyms(), 0, 1, 2));
        let am = eval_access(&c, &init);
        let iv = &am.get("A").unwrap()[0];
        assert_eq!(concretize(&c, iv, &bounds).unwrap(), (7, 12));
    }

    #[test]
    fn identity_plus_zero() {
        let c = ctx("def id(A(1)) -> lambda i: A[i]");
        let i = SymInterval::part(c.nsyms(), 0, 0, 2);
        let same = interval_arith(IntervalOp::AddConst(rat(0)), &i).unwrap();
        assert_eq!(same, i);
    }

    #[test]
    fn interval_product_errors() {
        let c = ctx("def id(A(1)) -> lambda i: A[i]");
        let i = SymInterval::part(c.nsyms(), 0, 0, 2);
        let e = interval_arith(IntervalOp::MulInterval(&i), &i).unwrap_err();
        assert_eq!(e, AnalysisError::NonAffine("product of two intervals is not supported"));
    }

    #[test]
    fn conv1d_split_batch() {
        let c = ctx("def conv1d(data(3), filters(3)) -> lambda b,co,x: reduce(Sum; ci,dx; data[b,ci,x+dx]*filters[ci,co,dx])");
        let mut init = BTreeMap::new();
        init.insert(
            "b".to_string(),
            SymInterval::part(c.nsyms(), c.var_symbol("b").unwrap(), 1, 2),
        );
        let am = eval_access(&c, &init);
        let data = am.get("data").unwrap();
        assert_eq!(
            data[0],
            SymInterval::part(c.nsyms(), c.var_symbol("b").unwrap(), 1, 2)
        );
        assert_eq!(
            data[1],
            SymInterval::full(c.nsyms(), c.var_symbol("ci").unwrap())
        );
        let filters = am.get("filters").unwrap();
        for (d, iv) in filters.iter().enumerate() {
            let sym = [
                c.var_symbol("ci").unwrap(),
                c.var_symbol("co").unwrap(),
                c.var_symbol("dx").unwrap(),
            ][d];
            assert_eq!(*iv, SymInterval::full(c.nsyms(), sym));
        }
    }

    #[test]
    fn linear_scaling_covers_full_range() {
        let c = ctx("def f(A(1)) -> lambda i: A[2*i]");
        let mut init = BTreeMap::new();
        init.insert("i".to_string(), SymInterval::part(c.nsyms(), 0, 0, 2));
        let am = eval_access(&c, &init);
        let iv = &am.get("A").unwrap()[0];
        assert_eq!(iv.lo, AffineForm::constant(c.nsyms(), rat(0)));
        assert_eq!(iv.hi, AffineForm::unit(c.nsyms(), 0, rat(1)));
    }

    #[test]
    fn ceil_on_odd_split() {
        let c = ctx("def id(A(1)) -> lambda i: A[i]");
        let iv = SymInterval::part(c.nsyms(), 0, 1, 2);
        let mut bounds = BTreeMap::new();
        bounds.insert("X_i".to_string(), 7);
        // Frozen from enumerating a 7-element split by hand: ceil(3.5) = 4.
        assert_eq!(concretize(&c, &iv, &bounds).unwrap(), (4, 7));
    }

    #[test]
    fn unbound_symbol_errors() {
        let c = ctx("def id(A(1)) -> lambda i: A[i]");
        let iv = SymInterval::full(c.nsyms(), 0);
        let e = concretize(&c, &iv, &BTreeMap::new()).unwrap_err();
        assert!(matches!(e, AnalysisError::UnboundSymbol(_)));
    }

    #[test]
    fn reversal_is_exact() {
        let c = ctx("def rev(A(1)) -> lambda i: A[7-i]");
        let am = eval_access(&c, &BTreeMap::new());
        let iv = &am.get("A").unwrap()[0];
        let mut bounds = BTreeMap::new();
        bounds.insert("X_i".to_string(), 8);
        assert_eq!(concretize(&c, iv, &bounds).unwrap(), (0, 8));
    }

    #[test]
    fn solve_conv1d_bindings() {
        let c = ctx("def conv1d(data(3), filters(3)) -> lambda b,co,x: reduce(Sum; ci,dx; data[b,ci,x+dx]*filters[ci,co,dx])");
        let data = [4u64, 3, 12];
        let filters = [3u64, 5, 4];
        let out = [4u64, 5, 8];
        let b = solve_bindings(&c, &[&data, &filters], &out).unwrap();
        assert_eq!(b["X_b"], 4);
        assert_eq!(b["X_co"], 5);
        assert_eq!(b["X_x"], 8);
        assert_eq!(b["X_ci"], 3);
        assert_eq!(b["X_dx"], 4);
    }

    #[test]
    fn solve_rejects_inconsistent_shapes() {
        let c = ctx("def matmul(A(2), B(2)) -> lambda i,j: reduce(Sum; k; A[i,k]*B[k,j])");
        let a = [4u64, 5];
        let b = [6u64, 3];
        let out = [4u64, 3];
        assert!(solve_bindings(&c, &[&a, &b], &out).is_err());
    }
}
