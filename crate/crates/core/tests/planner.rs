//! Planner behavior on the worked matrix-multiplication fixtures.

use graphshard::coarsen::{coarsen, cut_states};
use graphshard::graph::{GraphBuilder, TensorRole};
use graphshard::planner::*;
use graphshard::tdl::parse_tdl;
use std::collections::BTreeMap;

fn prog() -> graphshard::tdl::Program {
    parse_tdl(
        "def matmul(A(2), B(2)) -> lambda i,j: reduce(Sum; k; A[i,k]*B[k,j])\n\
         def add(A(2), B(2)) -> lambda i,j: A[i,j]+B[i,j]\n\
         def sigmoid(Z(2)) -> lambda i,j: opaque(Sigmoid; Z[i,j])\n",
    )
    .unwrap()
}

fn matmul_graph() -> graphshard::graph::DataflowGraph {
    GraphBuilder::new()
        .tensor("A", &[8, 8], TensorRole::Input)
        .tensor("B", &[8, 8], TensorRole::Weight)
        .tensor("C", &[8, 8], TensorRole::Activation)
        .op("mm", "matmul", &["A", "B"], "C")
        .build(&prog())
        .unwrap()
}

fn plan(
    ways: usize,
    dims: &[(&str, usize)],
    strat: (&str, &str, ChoiceKind),
) -> BasicPlan {
    let mut tensor_dims = BTreeMap::new();
    for (t, d) in dims {
        tensor_dims.insert(t.to_string(), *d);
    }
    let mut op_strategies = BTreeMap::new();
    op_strategies.insert(
        strat.0.to_string(),
        StrategyChoice {
            split_var: strat.1.to_string(),
            kind: strat.2.clone(),
        },
    );
    BasicPlan {
        ways,
        tensor_dims,
        op_strategies,
        cost: 0,
    }
}

#[test]
fn row_split_costs_256_bytes() {
    let g = matmul_graph();
    let pg = PlanGraph::new(&g, &prog()).unwrap();
    let p = plan(
        2,
        &[("A", 0), ("B", 0), ("C", 0)],
        ("mm", "i", ChoiceKind::Concat { dim: 0 }),
    );
    assert_eq!(plan_cost(&pg, &p).unwrap(), 256);
    assert_eq!(cost_by_ops(&pg, &p), 256);
}

#[test]
fn reduce_split_row_stored_costs_384_bytes() {
    let g = matmul_graph();
    let pg = PlanGraph::new(&g, &prog()).unwrap();
    let p = plan(
        2,
        &[("A", 0), ("B", 0), ("C", 0)],
        (
            "mm",
            "k",
            ChoiceKind::Reduce {
                reducer: graphshard::tdl::Reducer::Sum,
            },
        ),
    );
    // Partial exchange: 2 workers ship half of a 64-elem partial = 256 B;
    // A required along k but stored along rows adds quarter misses = 128 B.
    assert_eq!(plan_cost(&pg, &p).unwrap(), 384);
    assert_eq!(cost_by_ops(&pg, &p), 384);
}

#[test]
fn reduce_split_aligned_inputs_cost_256_bytes() {
    let g = matmul_graph();
    let pg = PlanGraph::new(&g, &prog()).unwrap();
    let p = plan(
        2,
        &[("A", 1), ("B", 0), ("C", 0)],
        (
            "mm",
            "k",
            ChoiceKind::Reduce {
                reducer: graphshard::tdl::Reducer::Sum,
            },
        ),
    );
    assert_eq!(plan_cost(&pg, &p).unwrap(), 256);
}

#[test]
fn elementwise_aligned_is_free() {
    let g = GraphBuilder::new()
        .tensor("A", &[8, 8], TensorRole::Input)
        .tensor("B", &[8, 8], TensorRole::Input)
        .tensor("C", &[8, 8], TensorRole::Activation)
        .op("ew", "add", &["A", "B"], "C")
        .build(&prog())
        .unwrap();
    let pg = PlanGraph::new(&g, &prog()).unwrap();
    let p = plan(
        2,
        &[("A", 0), ("B", 0), ("C", 0)],
        ("ew", "i", ChoiceKind::Concat { dim: 0 }),
    );
    assert_eq!(plan_cost(&pg, &p).unwrap(), 0);
}

#[test]
fn dp_on_matmul_matches_oracle() {
    let g = matmul_graph();
    let prog = prog();
    let pg = PlanGraph::new(&g, &prog).unwrap();
    let cg = coarsen(&g, &prog).unwrap();
    let best = dp_partition(&pg, &cg, 2).unwrap();
    // Minimum over {row, col, reduce} basic plans.
    let candidates = [
        plan(2, &[("A", 0), ("B", 0), ("C", 0)], ("mm", "i", ChoiceKind::Concat { dim: 0 })),
        plan(2, &[("A", 1), ("B", 1), ("C", 1)], ("mm", "j", ChoiceKind::Concat { dim: 1 })),
        plan(
            2,
            &[("A", 1), ("B", 0), ("C", 0)],
            (
                "mm",
                "k",
                ChoiceKind::Reduce {
                    reducer: graphshard::tdl::Reducer::Sum,
                },
            ),
        ),
    ];
    let min = candidates
        .iter()
        .map(|p| plan_cost(&pg, p).unwrap())
        .min()
        .unwrap();
    assert_eq!(best.cost, min);
    let oracle = brute_force_oracle(&g, &prog, 2, 1 << 30).unwrap();
    assert_eq!(oracle.total_cost, best.cost);
}

#[test]
fn recursive_k4_matches_oracle() {
    let g = matmul_graph();
    let prog = prog();
    let rec = recursive_partition(&g, &prog, 4).unwrap();
    let oracle = brute_force_oracle(&g, &prog, 4, 1 << 30).unwrap();
    assert_eq!(rec.total_cost, oracle.total_cost);
    assert_eq!(rec.factors, vec![2, 2]);
    assert_eq!(rec.step_costs.len(), 2);
}

#[test]
fn recursive_k2_is_single_dp_step() {
    let g = matmul_graph();
    let prog = prog();
    let rec = recursive_partition(&g, &prog, 2).unwrap();
    let pg = PlanGraph::new(&g, &prog).unwrap();
    let cg = coarsen(&g, &prog).unwrap();
    let dp = dp_partition(&pg, &cg, 2).unwrap();
    assert_eq!(rec.steps.len(), 1);
    assert_eq!(rec.total_cost, dp.cost);
}

#[test]
fn factorization_is_nonincreasing_primes() {
    assert_eq!(factorize_workers(8), vec![2, 2, 2]);
    assert_eq!(factorize_workers(12), vec![3, 2, 2]);
    assert_eq!(factorize_workers(7), vec![7]);
}

#[test]
fn mlp_cut_is_activation_and_gradient() {
    let prog = parse_tdl(
        "def matmul(A(2), B(2)) -> lambda i,j: reduce(Sum; k; A[i,k]*B[k,j])\n\
         def matmul_nt(DY(2), B(2)) -> lambda i,k: reduce(Sum; j; DY[i,j]*B[k,j])\n\
         def matmul_tn(A(2), DY(2)) -> lambda k,j: reduce(Sum; i; A[i,k]*DY[i,j])\n\
         def sigmoid(Z(2)) -> lambda i,j: opaque(Sigmoid; Z[i,j])\n\
         def sigmoid_grad(DY(2), Y(2)) -> lambda i,j: DY[i,j]*Y[i,j]*(1-Y[i,j])\n",
    )
    .unwrap();
    let n = 8u64;
    let g = GraphBuilder::new()
        .tensor("x", &[n, n], TensorRole::Input)
        .tensor("W1", &[n, n], TensorRole::Weight)
        .tensor("W2", &[n, n], TensorRole::Weight)
        .tensor("z1", &[n, n], TensorRole::Activation)
        .tensor("a1", &[n, n], TensorRole::Activation)
        .tensor("z2", &[n, n], TensorRole::Activation)
        .tensor("a2", &[n, n], TensorRole::Activation)
        .grad("d_a2", &[n, n], "a2")
        .grad("d_z2", &[n, n], "z2")
        .grad("d_a1", &[n, n], "a1")
        .grad("d_z1", &[n, n], "z1")
        .grad("d_x", &[n, n], "x")
        .grad("d_W1", &[n, n], "W1")
        .grad("d_W2", &[n, n], "W2")
        .op("mm1", "matmul", &["x", "W1"], "z1")
        .op("sig1", "sigmoid", &["z1"], "a1")
        .op("mm2", "matmul", &["a1", "W2"], "z2")
        .op("sig2", "sigmoid", &["z2"], "a2")
        .backward_op("sig2_b", "sigmoid_grad", &["d_a2", "a2"], "d_z2", "sig2")
        .backward_op("mm2_bA", "matmul_nt", &["d_z2", "W2"], "d_a1", "mm2")
        .backward_op("mm2_bW", "matmul_tn", &["a1", "d_z2"], "d_W2", "mm2")
        .backward_op("sig1_b", "sigmoid_grad", &["d_a1", "a1"], "d_z1", "sig1")
        .backward_op("mm1_bA", "matmul_nt", &["d_z1", "W1"], "d_x", "mm1")
        .backward_op("mm1_bW", "matmul_tn", &["x", "d_z1"], "d_W1", "mm1")
        .build(&prog)
        .unwrap();
    assert_eq!(g.ops.len(), 10); // 4 forward + 6 backward
    let cg = coarsen(&g, &prog).unwrap();
    // Chain isomorphic to the forward graph: one group per forward op, one
    // per activation pair; inputs/weights/outputs absorbed.
    assert_eq!(cg.groups.len(), 7);
    // The cut after the sig1 group holds exactly {a1, d_a1}.
    let gi = cg.membership[&"o:sig1".to_string()];
    let cut = cut_states(&cg, &g, gi + 1).unwrap();
    assert_eq!(cut, vec!["a1".to_string(), "d_a1".to_string()]);
}
