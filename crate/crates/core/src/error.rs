//! Error types, grouped by pipeline stage.

use thiserror::Error;

/// Errors produced while parsing or validating operator descriptions.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TdlError {
    #[error("syntax error at {line}:{col}: expected {expected}, found `{found}`")]
    Syntax {
        line: usize,
        col: usize,
        expected: String,
        found: String,
    },
    #[error("duplicate operator `{0}`")]
    DuplicateDef(String),
    #[error("duplicate name `{0}` in operator definition")]
    DuplicateVar(String),
    #[error("operator `{op}`: tensor `{0}` is not a declared parameter", .tensor)]
    UndeclaredTensor { op: String, tensor: String },
    #[error("operator `{op}`: `{0}` is not a declared index variable", .var)]
    UndeclaredVar { op: String, var: String },
    #[error("operator `{op}`: tensor `{tensor}` has rank {declared} but is accessed with {used} indices")]
    RankMismatch {
        op: String,
        tensor: String,
        declared: usize,
        used: usize,
    },
    #[error("operator `{op}`: non-affine index expression: {detail}")]
    NonAffineIndex { op: String, detail: String },
    #[error("operator `{op}`: nested or multiple reducers")]
    NestedReduce { op: String },
    #[error("operator `{op}`: index variable `{var}` addresses more than one dimension of tensor `{tensor}`")]
    AssumptionViolation {
        op: String,
        var: String,
        tensor: String,
    },
    #[error("division by zero in constant expression")]
    DivByZero,
}

/// Errors from symbolic interval analysis.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum AnalysisError {
    #[error("non-affine interval operation: {0}")]
    NonAffine(&'static str),
    #[error("unbound symbol `{0}`")]
    UnboundSymbol(String),
}

/// Errors from strategy discovery.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum StrategyError {
    #[error("operator `{0}` has no partition strategy")]
    NoStrategy(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Errors from loading, validating or coarsening dataflow graphs.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GraphError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unknown operator `{def}` referenced by op `{op}`")]
    UnknownOperator { op: String, def: String },
    #[error("shape mismatch at op `{op}`: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("cycle detected involving op `{0}`")]
    CycleDetected(String),
    #[error("coarsened graph is not linear: {detail}")]
    NotLinear { detail: String },
    #[error("cut {cut} is too wide: {states} states exceed the limit of {limit}")]
    CutTooWide {
        cut: usize,
        states: u128,
        limit: u128,
    },
}

/// Errors from planning.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum PlanError {
    #[error("operator `{0}` has no usable partition strategy at this step")]
    NoStrategy(String),
    #[error("tensor `{0}` has no dimension divisible by the step factor")]
    IndivisibleShape(String),
    #[error("incomplete plan: {0}")]
    IncompletePlan(String),
    #[error("shape cannot be concretized: {0}")]
    UnconcretizableShape(String),
    #[error("inconsistent plan: {0}")]
    InconsistentPlan(String),
    #[error("enumeration size {estimate} exceeds the limit of {max}")]
    TooLarge { estimate: u128, max: u128 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

/// Errors from the interconnect simulator.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),
}
