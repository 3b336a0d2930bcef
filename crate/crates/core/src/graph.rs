//! Dataflow graphs of operators and tensors with concrete shapes.

use crate::error::GraphError;
use crate::interval::{solve_bindings, AnalysisCtx};
use crate::tdl::Program;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Activation,
    Gradient,
    Input,
    ExtraInput,
}

impl Default for TensorRole {
    fn default() -> Self {
        TensorRole::Activation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorNode {
    pub shape: Vec<u64>,
    #[serde(default)]
    pub role: TensorRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestep: Option<(String, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub def: String,
    pub inputs: Vec<String>,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestep: Option<(String, u32)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct GraphFile {
    #[serde(default)]
    tensors: BTreeMap<String, TensorNode>,
    #[serde(default)]
    ops: BTreeMap<String, OpNode>,
}

/// A validated dataflow graph. Immutable after load.
#[derive(Debug, Clone)]
pub struct DataflowGraph {
    pub tensors: BTreeMap<String, TensorNode>,
    pub ops: BTreeMap<String, OpNode>,
    /// Op ids in topological order (deterministic).
    pub topo: Vec<String>,
    /// Producer op of each tensor, when any.
    pub producer: BTreeMap<String, String>,
    /// Consumer ops of each tensor.
    pub consumers: BTreeMap<String, Vec<String>>,
    /// Shared analysis context per operator definition used.
    pub analyses: BTreeMap<String, AnalysisCtx>,
    /// Concrete symbol bounds per op instance.
    pub bindings: BTreeMap<String, BTreeMap<String, u64>>,
}

impl DataflowGraph {
    pub fn from_json(json: &str, prog: &Program) -> Result<Self, GraphError> {
        let file: GraphFile =
            serde_json::from_str(json).map_err(|e| GraphError::Schema(e.to_string()))?;
        Self::from_parts(file.tensors, file.ops, prog)
    }

    pub fn from_parts(
        tensors: BTreeMap<String, TensorNode>,
        ops: BTreeMap<String, OpNode>,
        prog: &Program,
    ) -> Result<Self, GraphError> {
        for (id, t) in &tensors {
            if t.shape.iter().any(|&d| d == 0) {
                return Err(GraphError::Schema(format!("tensor `{id}` has a zero dim")));
            }
            if let Some(g) = &t.grad_of {
                if !tensors.contains_key(g) {
                    return Err(GraphError::Schema(format!(
                        "tensor `{id}` is grad_of unknown tensor `{g}`"
                    )));
                }
            }
        }
        let mut producer: BTreeMap<String, String> = BTreeMap::new();
        let mut consumers: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, op) in &ops {
            if let Some(b) = &op.backward_of {
                if !ops.contains_key(b) {
                    return Err(GraphError::Schema(format!(
                        "op `{id}` is backward_of unknown op `{b}`"
                    )));
                }
            }
            for t in op.inputs.iter().chain([&op.output]) {
                if !tensors.contains_key(t) {
                    return Err(GraphError::Schema(format!(
                        "op `{id}` references unknown tensor `{t}`"
                    )));
                }
            }
            if let Some(prev) = producer.insert(op.output.clone(), id.clone()) {
                return Err(GraphError::Schema(format!(
                    "tensor `{}` produced by both `{prev}` and `{id}`",
                    op.output
                )));
            }
            for t in &op.inputs {
                consumers.entry(t.clone()).or_default().push(id.clone());
            }
        }

        // Shape validation against each op's definition.
        let mut analyses: BTreeMap<String, AnalysisCtx> = BTreeMap::new();
        let mut bindings = BTreeMap::new();
        for (id, op) in &ops {
            let def = prog.get(&op.def).ok_or_else(|| GraphError::UnknownOperator {
                op: id.clone(),
                def: op.def.clone(),
            })?;
            if op.inputs.len() != def.params.len() {
                return Err(GraphError::ShapeMismatch {
                    op: id.clone(),
                    detail: format!(
                        "{} inputs given, definition takes {}",
                        op.inputs.len(),
                        def.params.len()
                    ),
                });
            }
            for (t, p) in op.inputs.iter().zip(&def.params) {
                let rank = tensors[t].shape.len();
                if rank != p.rank {
                    return Err(GraphError::ShapeMismatch {
                        op: id.clone(),
                        detail: format!(
                            "input `{t}` has rank {rank}, parameter `{}` expects {}",
                            p.name, p.rank
                        ),
                    });
                }
            }
            let out_rank = tensors[&op.output].shape.len();
            if out_rank != def.output_vars.len() {
                return Err(GraphError::ShapeMismatch {
                    op: id.clone(),
                    detail: format!(
                        "output `{}` has rank {out_rank}, definition produces rank {}",
                        op.output,
                        def.output_vars.len()
                    ),
                });
            }
            let ctx = analyses
                .entry(op.def.clone())
                .or_insert_with(|| AnalysisCtx::new(def));
            let shapes: Vec<&[u64]> = op.inputs.iter().map(|t| tensors[t].shape.as_slice()).collect();
            let b = solve_bindings(ctx, &shapes, &tensors[&op.output].shape)
                .map_err(|detail| GraphError::ShapeMismatch {
                    op: id.clone(),
                    detail,
                })?;
            bindings.insert(id.clone(), b);
        }

        // Kahn's algorithm over op -> op edges through tensors.
        let mut indeg: BTreeMap<&str, usize> = ops.keys().map(|k| (k.as_str(), 0)).collect();
        for (id, op) in &ops {
            let n = op
                .inputs
                .iter()
                .filter(|t| producer.contains_key(*t))
                .count();
            indeg.insert(id.as_str(), n);
        }
        let mut ready: Vec<&str> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&k, _)| k)
            .collect();
        ready.sort();
        let mut topo = Vec::new();
        let mut queue = std::collections::VecDeque::from(ready);
        while let Some(id) = queue.pop_front() {
            topo.push(id.to_string());
            let op = &ops[id];
            let mut next = Vec::new();
            for c in consumers.get(&op.output).map(|v| v.as_slice()).unwrap_or(&[]) {
                let d = indeg.get_mut(c.as_str()).unwrap();
                *d -= 1;
                if *d == 0 {
                    next.push(c.as_str());
                }
            }
            next.sort();
            queue.extend(next);
        }
        if topo.len() != ops.len() {
            let stuck = ops
                .keys()
                .find(|k| !topo.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(GraphError::CycleDetected(stuck));
        }

        Ok(DataflowGraph {
            tensors,
            ops,
            topo,
            producer,
            consumers,
            analyses,
            bindings,
        })
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            tensors: self.tensors.clone(),
            ops: self.ops.clone(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    /// Total bytes of all tensors at the given element size.
    pub fn total_bytes(&self, elem_size: u64) -> u64 {
        self.tensors
            .values()
            .map(|t| t.shape.iter().product::<u64>() * elem_size)
            .sum()
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph dataflow {\n  rankdir=LR;\n");
        for (id, t) in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!(
                "  \"t:{id}\" [shape=box, label=\"{id}\\n[{}]\"];\n",
                shape.join("x")
            ));
        }
        for (id, op) in &self.ops {
            s.push_str(&format!("  \"o:{id}\" [shape=ellipse, label=\"{id}\\n{}\"];\n", op.def));
            for t in &op.inputs {
                s.push_str(&format!("  \"t:{t}\" -> \"o:{id}\";\n"));
            }
            s.push_str(&format!("  \"o:{id}\" -> \"t:{}\";\n", op.output));
        }
        s.push_str("}\n");
        s
    }
}

/// Convenience builder for graphs constructed in code (tests, generators).
#[derive(Default)]
pub struct GraphBuilder {
    tensors: BTreeMap<String, TensorNode>,
    ops: BTreeMap<String, OpNode>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(mut self, id: &str, shape: &[u64], role: TensorRole) -> Self {
        self.tensors.insert(
            id.to_string(),
            TensorNode {
                shape: shape.to_vec(),
                role,
                grad_of: None,
                timestep: None,
            },
        );
        self
    }

    pub fn grad(mut self, id: &str, shape: &[u64], of: &str) -> Self {
        self.tensors.insert(
            id.to_string(),
            TensorNode {
                shape: shape.to_vec(),
                role: TensorRole::Gradient,
                grad_of: Some(of.to_string()),
                timestep: None,
            },
        );
        self
    }

    pub fn tensor_at(mut self, id: &str, shape: &[u64], role: TensorRole, tag: (&str, u32)) -> Self {
        self.tensors.insert(
            id.to_string(),
            TensorNode {
                shape: shape.to_vec(),
                role,
                grad_of: None,
                timestep: Some((tag.0.to_string(), tag.1)),
            },
        );
        self
    }

    pub fn op(mut self, id: &str, def: &str, inputs: &[&str], output: &str) -> Self {
        self.ops.insert(
            id.to_string(),
            OpNode {
                def: def.to_string(),
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
                output: output.to_string(),
                backward_of: None,
                timestep: None,
            },
        );
        self
    }

    pub fn backward_op(mut self, id: &str, def: &str, inputs: &[&str], output: &str, of: &str) -> Self {
        self.ops.insert(
            id.to_string(),
            OpNode {
                def: def.to_string(),
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
                output: output.to_string(),
                backward_of: Some(of.to_string()),
                timestep: None,
            },
        );
        self
    }

    pub fn op_at(mut self, id: &str, def: &str, inputs: &[&str], output: &str, tag: (&str, u32)) -> Self {
        self.ops.insert(
            id.to_string(),
            OpNode {
                def: def.to_string(),
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
                output: output.to_string(),
                backward_of: None,
                timestep: Some((tag.0.to_string(), tag.1)),
            },
        );
        self
    }

    pub fn build(self, prog: &Program) -> Result<DataflowGraph, GraphError> {
        DataflowGraph::from_parts(self.tensors, self.ops, prog)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdl::parse_tdl;

    fn prog() -> Program {
        parse_tdl(
            "def matmul(A(2), B(2)) -> lambda i,j: reduce(Sum; k; A[i,k]*B[k,j])\n\
             def add(A(2), B(2)) -> lambda i,j: A[i,j]+B[i,j]\n",
        )
        .unwrap()
    }

    #[test]
    fn empty_graph_loads() {
        let g = DataflowGraph::from_json("{\"tensors\":{},\"ops\":{}}", &prog()).unwrap();
        assert!(g.tensors.is_empty() && g.ops.is_empty());
    }

    #[test]
    fn rank_mismatch_rejected() {
        let g = GraphBuilder::new()
            .tensor("A", &[4, 4, 2], TensorRole::Input)
            .tensor("B", &[4, 4], TensorRole::Weight)
            .tensor("C", &[4, 4], TensorRole::Activation)
            .op("mm", "matmul", &["A", "B"], "C")
            .build(&prog());
        assert!(matches!(g, Err(GraphError::ShapeMismatch { .. })));
    }

    #[test]
    fn inconsistent_contraction_rejected() {
        let g = GraphBuilder::new()
            .tensor("A", &[4, 5], TensorRole::Input)
            .tensor("B", &[6, 4], TensorRole::Weight)
            .tensor("C", &[4, 4], TensorRole::Activation)
            .op("mm", "matmul", &["A", "B"], "C")
            .build(&prog());
        assert!(matches!(g, Err(GraphError::ShapeMismatch { .. })));
    }

    #[test]
    fn cycles_rejected() {
        let g = GraphBuilder::new()
            .tensor("A", &[4, 4], TensorRole::Activation)
            .tensor("B", &[4, 4], TensorRole::Activation)
            .tensor("C", &[4, 4], TensorRole::Activation)
            .op("f", "add", &["A", "B"], "C")
            .op("g", "add", &["C", "C"], "B")
            .build(&prog());
        assert!(matches!(g, Err(GraphError::CycleDetected(_))));
    }

    #[test]
    fn json_roundtrip_is_identity() {
        let g = GraphBuilder::new()
            .tensor("A", &[4, 4], TensorRole::Input)
            .tensor("B", &[4, 4], TensorRole::Weight)
            .tensor("C", &[4, 4], TensorRole::Activation)
            .grad("dC", &[4, 4], "C")
            .op("mm", "matmul", &["A", "B"], "C")
            .build(&prog())
            .unwrap();
        let j = g.to_json();
        let g2 = DataflowGraph::from_json(&j, &prog()).unwrap();
        assert_eq!(g.tensors, g2.tensors);
        assert_eq!(g.ops, g2.ops);
        assert_eq!(j, g2.to_json());
    }
}
