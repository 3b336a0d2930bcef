//! The operator description language: tensors as lambda functions from
//! coordinates to values.
//!
//! An operator is described by a single expression giving the output value at
//! an arbitrary coordinate tuple. The expression may read input tensors at
//! affine index expressions, reduce an inner expression over extra index
//! variables with a commutative reducer, or call an opaque function whose
//! internals are not analyzable. Descriptions are analyzed (never executed on
//! real data, except by the reference interpreter in tests) to derive how an
//! operator can be partitioned.

mod parse;

pub use parse::parse_tdl;

use crate::error::TdlError;
use num::rational::Ratio;
use std::collections::BTreeMap;
use std::fmt;

/// Exact rational scalar used throughout the analysis.
pub type Rat = Ratio<i64>;

/// A parsed and validated collection of operator definitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub defs: Vec<OperatorDef>,
    index: BTreeMap<String, usize>,
}

impl Program {
    pub fn new(defs: Vec<OperatorDef>) -> Result<Self, TdlError> {
        let mut index = BTreeMap::new();
        for (i, d) in defs.iter().enumerate() {
            if index.insert(d.name.clone(), i).is_some() {
                return Err(TdlError::DuplicateDef(d.name.clone()));
            }
        }
        Ok(Program { defs, index })
    }

    pub fn get(&self, name: &str) -> Option<&OperatorDef> {
        self.index.get(name).map(|&i| &self.defs[i])
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.defs {
            writeln!(f, "{d}")?;
        }
        Ok(())
    }
}

/// One tensor parameter of an operator: name plus rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    pub rank: usize,
}

/// A validated operator definition.
///
/// `body` holds the full expression; when the operator reduces, the reducer
/// node sits at the top of the body and `reduce_vars` mirrors its variables.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDef {
    pub name: String,
    pub params: Vec<Param>,
    pub output_vars: Vec<String>,
    pub reduce_vars: Vec<String>,
    pub reducer: Option<Reducer>,
    pub body: Expr,
}

/// Built-in commutative, associative reducers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Reducer {
    Sum,
    Max,
    Min,
    Prod,
}

impl fmt::Display for Reducer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reducer::Sum => "Sum",
            Reducer::Max => "Max",
            Reducer::Min => "Min",
            Reducer::Prod => "Prod",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// An affine index expression, normalized to integer coefficients over index
/// variables plus a constant offset. Terms are kept in variable declaration
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexExpr {
    pub terms: Vec<(String, i64)>,
    pub offset: i64,
}

impl IndexExpr {
    pub fn var(name: &str) -> Self {
        IndexExpr {
            terms: vec![(name.to_string(), 1)],
            offset: 0,
        }
    }

    /// True when this is exactly the given variable with coefficient 1.
    pub fn is_var(&self, name: &str) -> bool {
        self.offset == 0 && self.terms.len() == 1 && self.terms[0] == (name.to_string(), 1)
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(|(v, _)| v.as_str())
    }
}

impl fmt::Display for IndexExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<(bool, String)> = Vec::new();
        for (v, c) in &self.terms {
            let s = match c.abs() {
                1 => v.clone(),
                a => format!("{a}*{v}"),
            };
            parts.push((*c < 0, s));
        }
        if self.offset != 0 || parts.is_empty() {
            parts.push((self.offset < 0, self.offset.abs().to_string()));
        }
        // Lead with a positive part when one exists.
        if parts[0].0 {
            if let Some(pos) = parts.iter().position(|(neg, _)| !neg) {
                parts.swap(0, pos);
            }
        }
        for (i, (neg, s)) in parts.iter().enumerate() {
            if i == 0 {
                if *neg {
                    write!(f, "-{s}")?;
                } else {
                    write!(f, "{s}")?;
                }
            } else if *neg {
                write!(f, " - {s}")?;
            } else {
                write!(f, " + {s}")?;
            }
        }
        Ok(())
    }
}

/// One per-dimension argument of an opaque call: an affine index or a whole
/// dimension (`:`).
#[derive(Debug, Clone, PartialEq)]
pub enum OpaqueArg {
    Index(IndexExpr),
    Slice,
}

/// A call to an unanalyzable function on a slice of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OpaqueCall {
    pub func: String,
    pub tensor: String,
    pub args: Vec<OpaqueArg>,
    pub result_vars: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var(String),
    Const(Rat),
    Access { tensor: String, indices: Vec<IndexExpr> },
    Arith(ArithOp, Box<Expr>, Box<Expr>),
    Reduce(Reducer, Vec<String>, Box<Expr>),
    Opaque(OpaqueCall),
}

impl Expr {
    fn prec(&self) -> u8 {
        match self {
            Expr::Arith(ArithOp::Add | ArithOp::Sub, ..) => 1,
            Expr::Arith(ArithOp::Mul | ArithOp::Div, ..) => 2,
            _ => 3,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let me = self.prec();
        if me < min {
            write!(f, "(")?;
            self.fmt_prec(f, 0)?;
            return write!(f, ")");
        }
        match self {
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Const(c) => {
                let s = fmt_rat(*c);
                // Quotient-form rationals must re-parse as one constant.
                if s.contains('/') {
                    write!(f, "({s})")
                } else {
                    write!(f, "{s}")
                }
            }
            Expr::Access { tensor, indices } => {
                write!(f, "{tensor}[")?;
                for (i, ix) in indices.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{ix}")?;
                }
                write!(f, "]")
            }
            Expr::Arith(op, a, b) => {
                let (sym, rp) = match op {
                    ArithOp::Add => ("+", me + 1),
                    ArithOp::Sub => ("-", me + 1),
                    ArithOp::Mul => ("*", me + 1),
                    ArithOp::Div => ("/", me + 1),
                };
                a.fmt_prec(f, me)?;
                write!(f, " {sym} ")?;
                b.fmt_prec(f, rp)
            }
            Expr::Reduce(r, vars, inner) => {
                write!(f, "reduce({r}; {}; ", vars.join(", "))?;
                inner.fmt_prec(f, 0)?;
                write!(f, ")")
            }
            Expr::Opaque(oc) => {
                write!(f, "opaque({}; {}[", oc.func, oc.tensor)?;
                for (i, a) in oc.args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    match a {
                        OpaqueArg::Slice => write!(f, ":")?,
                        OpaqueArg::Index(ix) => write!(f, "{ix}")?,
                    }
                }
                write!(f, "])")?;
                if !oc.result_vars.is_empty() {
                    write!(f, "[{}]", oc.result_vars.join(", "))?;
                }
                Ok(())
            }
        }
    }

    /// Walk all tensor accesses (plain and opaque) in the expression.
    pub fn visit_accesses<'a>(&'a self, f: &mut dyn FnMut(TensorUse<'a>)) {
        match self {
            Expr::Access { tensor, indices } => f(TensorUse::Plain { tensor, indices }),
            Expr::Arith(_, a, b) => {
                a.visit_accesses(f);
                b.visit_accesses(f);
            }
            Expr::Reduce(_, _, inner) => inner.visit_accesses(f),
            Expr::Opaque(oc) => f(TensorUse::Opaque(oc)),
            Expr::Var(_) | Expr::Const(_) => {}
        }
    }
}

/// One use of a tensor inside an operator body.
#[derive(Debug, Clone, Copy)]
pub enum TensorUse<'a> {
    Plain {
        tensor: &'a str,
        indices: &'a [IndexExpr],
    },
    Opaque(&'a OpaqueCall),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl fmt::Display for OperatorDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "def {}(", self.name)?;
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}({})", p.name, p.rank)?;
        }
        write!(f, ") -> lambda {}: {}", self.output_vars.join(", "), self.body)
    }
}

/// Render a rational the way the parser reads it back: integers plainly,
/// dyadic/decimal denominators as decimals, the rest as a constant quotient.
pub fn fmt_rat(r: Rat) -> String {
    let (n, d) = (*r.numer(), *r.denom());
    if d == 1 {
        return n.to_string();
    }
    // Try an exact decimal expansion.
    let mut den = d;
    let mut twos = 0u32;
    let mut fives = 0u32;
    while den % 2 == 0 {
        den /= 2;
        twos += 1;
    }
    while den % 5 == 0 {
        den /= 5;
        fives += 1;
    }
    if den == 1 {
        let digits = twos.max(fives);
        let scale = 10i64.pow(digits);
        let scaled = n * (scale / d);
        let sign = if scaled < 0 { "-" } else { "" };
        let a = scaled.abs();
        let int = a / scale;
        let frac = a % scale;
        return format!("{sign}{int}.{frac:0w$}", w = digits as usize);
    }
    format!("{n}/{d}")
}

/// Classification of a validated operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpClass {
    /// Every input is read exactly at the output coordinate tuple.
    ElementWise,
    /// Carries the reduction variables.
    Reduction(Vec<String>),
    /// Opaque call present; carries the partitionable batch dims.
    OpaqueBatched(Vec<String>),
    General,
}

/// Classify a validated operator. Total: never fails on validated defs.
pub fn classify(def: &OperatorDef) -> OpClass {
    let mut has_opaque = false;
    let mut blocked: Vec<&str> = Vec::new();
    let mut identity = true;
    def.body.visit_accesses(&mut |u| match u {
        TensorUse::Plain { indices, .. } => {
            let id = indices.len() == def.output_vars.len()
                && indices
                    .iter()
                    .zip(&def.output_vars)
                    .all(|(ix, v)| ix.is_var(v));
            if !id {
                identity = false;
            }
        }
        TensorUse::Opaque(oc) => {
            has_opaque = true;
            blocked.extend(oc.result_vars.iter().map(|s| s.as_str()));
        }
    });
    if has_opaque {
        let free = def
            .output_vars
            .iter()
            .filter(|v| !blocked.contains(&v.as_str()))
            .cloned()
            .collect();
        return OpClass::OpaqueBatched(free);
    }
    if !def.reduce_vars.is_empty() {
        return OpClass::Reduction(def.reduce_vars.clone());
    }
    if identity {
        return OpClass::ElementWise;
    }
    OpClass::General
}

/// Validate a definition after parsing. Checks naming, ranks, reducer
/// placement and the one-dimension-per-variable access restriction.
pub(crate) fn validate(def: &OperatorDef) -> Result<(), TdlError> {
    let op = || def.name.clone();
    let mut names: Vec<&str> = Vec::new();
    for p in &def.params {
        if names.contains(&p.name.as_str()) {
            return Err(TdlError::DuplicateVar(p.name.clone()));
        }
        names.push(&p.name);
    }
    for v in def.output_vars.iter().chain(&def.reduce_vars) {
        if names.contains(&v.as_str()) {
            return Err(TdlError::DuplicateVar(v.clone()));
        }
        names.push(v);
    }

    // Reducers: exactly the top-level one recorded by the parser.
    fn count_reduces(e: &Expr) -> usize {
        match e {
            Expr::Reduce(_, _, inner) => 1 + count_reduces(inner),
            Expr::Arith(_, a, b) => count_reduces(a) + count_reduces(b),
            _ => 0,
        }
    }
    let inner_reduces = match &def.body {
        Expr::Reduce(_, _, inner) => count_reduces(inner),
        other => count_reduces(other),
    };
    if inner_reduces > 0 {
        return Err(TdlError::NestedReduce { op: op() });
    }

    let rank_of = |t: &str| def.params.iter().find(|p| p.name == t).map(|p| p.rank);
    let var_ok = |v: &str| {
        def.output_vars.iter().any(|x| x == v) || def.reduce_vars.iter().any(|x| x == v)
    };

    let mut err: Option<TdlError> = None;
    let mut var_dims: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    def.body.visit_accesses(&mut |u| {
        if err.is_some() {
            return;
        }
        let (tensor, dims): (&str, Vec<(usize, Vec<&str>)>) = match u {
            TensorUse::Plain { tensor, indices } => {
                match rank_of(tensor) {
                    None => {
                        err = Some(TdlError::UndeclaredTensor {
                            op: op(),
                            tensor: tensor.to_string(),
                        });
                        return;
                    }
                    Some(r) if r != indices.len() => {
                        err = Some(TdlError::RankMismatch {
                            op: op(),
                            tensor: tensor.to_string(),
                            declared: r,
                            used: indices.len(),
                        });
                        return;
                    }
                    _ => {}
                }
                (
                    tensor,
                    indices
                        .iter()
                        .enumerate()
                        .map(|(d, ix)| (d, ix.vars().collect()))
                        .collect(),
                )
            }
            TensorUse::Opaque(oc) => {
                match rank_of(&oc.tensor) {
                    None => {
                        err = Some(TdlError::UndeclaredTensor {
                            op: op(),
                            tensor: oc.tensor.clone(),
                        });
                        return;
                    }
                    Some(r) if r != oc.args.len() => {
                        err = Some(TdlError::RankMismatch {
                            op: op(),
                            tensor: oc.tensor.clone(),
                            declared: r,
                            used: oc.args.len(),
                        });
                        return;
                    }
                    _ => {}
                }
                for v in &oc.result_vars {
                    if !var_ok(v) {
                        err = Some(TdlError::UndeclaredVar {
                            op: op(),
                            var: v.clone(),
                        });
                        return;
                    }
                }
                (
                    oc.tensor.as_str(),
                    oc.args
                        .iter()
                        .enumerate()
                        .filter_map(|(d, a)| match a {
                            OpaqueArg::Index(ix) => Some((d, ix.vars().collect())),
                            OpaqueArg::Slice => None,
                        })
                        .collect(),
                )
            }
        };
        for (d, vars) in dims {
            for v in vars {
                if !var_ok(v) {
                    err = Some(TdlError::UndeclaredVar {
                        op: op(),
                        var: v.to_string(),
                    });
                    return;
                }
                let e = var_dims
                    .entry((tensor.to_string(), v.to_string()))
                    .or_default();
                if !e.contains(&d) {
                    e.push(d);
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    for ((tensor, var), dims) in &var_dims {
        if dims.len() > 1 {
            return Err(TdlError::AssumptionViolation {
                op: op(),
                var: var.clone(),
                tensor: tensor.clone(),
            });
        }
    }

    // Bare variable references must also be declared.
    fn check_vars(e: &Expr, ok: &dyn Fn(&str) -> bool) -> Option<String> {
        match e {
            Expr::Var(v) => (!ok(v)).then(|| v.clone()),
            Expr::Arith(_, a, b) => check_vars(a, ok).or_else(|| check_vars(b, ok)),
            Expr::Reduce(_, _, inner) => check_vars(inner, ok),
            _ => None,
        }
    }
    if let Some(v) = check_vars(&def.body, &var_ok) {
        return Err(TdlError::UndeclaredVar { op: op(), var: v });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(src: &str) -> OperatorDef {
        parse_tdl(src).unwrap().defs.remove(0)
    }

    #[test]
    fn parses_conv1d() {
        let d = one("def conv1d(data(3), filters(3)) -> lambda b,co,x: reduce(Sum; ci,dx; data[b,ci,x+dx]*filters[ci,co,dx])");
        assert_eq!(d.output_vars, ["b", "co", "x"]);
        assert_eq!(d.reduce_vars, ["ci", "dx"]);
        assert_eq!(d.reducer, Some(Reducer::Sum));
        assert_eq!(classify(&d), OpClass::Reduction(vec!["ci".into(), "dx".into()]));
    }

    #[test]
    fn identity_is_elementwise() {
        let d = one("def id(A(1)) -> lambda i: A[i]");
        assert_eq!(classify(&d), OpClass::ElementWise);
        let d = one("def add(A(2),B(2)) -> lambda i,j: A[i,j]+B[i,j]");
        assert_eq!(classify(&d), OpClass::ElementWise);
    }

    #[test]
    fn batch_opaque_classification() {
        let d = one("def batch_cholesky(batch_mat(3)) -> lambda b,i,j: opaque(Cholesky; batch_mat[b,:,:])[i,j]");
        assert_eq!(classify(&d), OpClass::OpaqueBatched(vec!["b".into()]));
    }

    #[test]
    fn same_var_on_two_dims_rejected() {
        let e = parse_tdl("def bad(A(2)) -> lambda i: A[i, i]").unwrap_err();
        assert!(matches!(e, TdlError::AssumptionViolation { .. }), "{e}");
    }

    #[test]
    fn nonaffine_rejected() {
        let e = parse_tdl("def bad(A(1)) -> lambda i: A[i*i]").unwrap_err();
        assert!(matches!(e, TdlError::NonAffineIndex { .. }), "{e}");
        let e = parse_tdl("def bad(A(1), B(1)) -> lambda i: A[i/2]").unwrap_err();
        assert!(matches!(e, TdlError::NonAffineIndex { .. }), "{e}");
    }

    #[test]
    fn nested_reduce_rejected() {
        let e = parse_tdl(
            "def bad(A(2)) -> lambda i: reduce(Sum; j; reduce(Max; k; A[j,k]))",
        )
        .unwrap_err();
        assert!(matches!(e, TdlError::NestedReduce { .. }), "{e}");
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse_tdl("def f(A(1)) -> lambda i: A[i] +").unwrap_err();
        assert!(matches!(e, TdlError::Syntax { .. }), "{e}");
    }

    #[test]
    fn opaque_never_elementwise() {
        let d = one("def s(Z(2)) -> lambda i,j: opaque(Sigmoid; Z[i,j])");
        assert!(matches!(classify(&d), OpClass::OpaqueBatched(v) if v == ["i", "j"]));
    }

    #[test]
    fn pretty_roundtrip_is_fixed_point() {
        let src = "\
def conv1d(data(3), filters(3)) -> lambda b,co,x: reduce(Sum; ci,dx; data[b,ci,x+dx]*filters[ci,co,dx])
def shift_two(A(1)) -> lambda i: A[i+2]
def rev(A(1)) -> lambda i: A[7-i]
def sgd(W(2), G(2)) -> lambda i,j: W[i,j] - G[i,j] * 0.01
def frac(A(1)) -> lambda i: A[i] * (1/3)
def bc(M(3)) -> lambda b,i,j: opaque(Chol; M[b,:,:])[i,j]
def neg(A(1)) -> lambda i: -A[i] + 2 * (A[i] - 1)
";
        let p1 = parse_tdl(src).unwrap();
        let printed = p1.to_string();
        let p2 = parse_tdl(&printed).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(printed, p2.to_string());
    }
}
