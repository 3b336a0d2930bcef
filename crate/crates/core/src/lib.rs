//! Automatic partitioning of tensor-operator dataflow graphs across workers,
//! minimizing total communication.
//!
//! The pipeline: operator semantics are written in a small tensor description
//! language (`tdl`), analyzed with symbolic intervals (`interval`) to discover
//! per-operator split strategies (`strategy`); a dataflow graph (`graph`) is
//! coarsened into a linear chain of groups (`coarsen`) and searched with a
//! recursive dynamic program (`planner`); the chosen plan is expanded into an
//! explicit per-worker graph (`materialize`) and evaluated against an
//! interconnect model (`simulate`). A reference interpreter (`interp`)
//! executes descriptions directly and is used to validate everything else.

pub mod error;
pub mod geom;
pub mod graph;
pub mod interp;
pub mod interval;
pub mod coarsen;
pub mod planner;
pub mod strategy;
pub mod tdl;

pub use tdl::{classify, parse_tdl, OpClass, OperatorDef, Program};
