#![allow(dead_code)]

pub mod ann;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lakescope::aggregation::{gcn_forward_tape, metapath_view_tape, Activations};
use lakescope::autodiff::{Activation, ContrastItem, Tape, Var};
use lakescope::encoder::{ContentSet, EncoderMode};
use lakescope::graphgen::{Edge, HeteroGraph, MetaPath, NodeKind, Occurrence};
use lakescope::model::{GraphContext, ModelParams, ModelShape};
use lakescope::objectives::{decode_tape, EdgeBatch};
use lakescope::tensor::Matrix;
use lakescope::trainer::{joint_loss_tape, Hyperparams};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;

pub fn edge(src: usize, dst: usize, weight: f64) -> Edge {
    Edge { src, dst, weight }
}

/// Four statements, four tables, every edge type present.
pub fn eight_node_graph() -> HeteroGraph {
    HeteroGraph::from_parts(
        (0..4).map(|i| format!("s{i}")).collect(),
        (0..4).map(|i| format!("t{i}")).collect(),
        vec![
            edge(0, 0, 1.0),
            edge(0, 1, 0.5),
            edge(1, 1, 0.8),
            edge(1, 3, 0.3),
            edge(2, 2, 1.0),
            edge(3, 2, 0.6),
            edge(3, 3, 0.9),
        ],
        vec![edge(0, 1, 0.7), edge(2, 3, 0.4)],
        vec![edge(0, 1, 0.2), edge(2, 3, 1.0)],
    )
    .expect("valid graph")
}

/// Random content: one element per statement, two or three per table.
pub fn random_contents(graph: &HeteroGraph, d_c: usize, seed: u64) -> Vec<ContentSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..graph.n_nodes())
        .map(|v| {
            let kind = graph.kind(v);
            let n = match kind {
                NodeKind::Statement => 1,
                NodeKind::Table => 2 + v % 2,
            };
            ContentSet {
                node_id: graph.node_id(v).to_string(),
                kind,
                elements: (0..n).map(|_| (0..d_c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            }
        })
        .collect()
}

pub struct GradFixture {
    pub graph: HeteroGraph,
    pub ctx: GraphContext,
    pub params: ModelParams,
    pub weights: Matrix,
}

pub fn fixture(mode: EncoderMode, seed: u64) -> GradFixture {
    let (d_c, d) = (6, 4);
    let graph = eight_node_graph();
    let contents = random_contents(&graph, d_c, seed);
    let ctx = GraphContext::new(&graph, &contents, d_c).expect("context");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let shape = ModelShape {
        mode,
        d_c,
        d,
        gcn_depth: 3,
    };
    let params = ModelParams::init(shape, &mut rng).expect("init");
    let weights = Matrix::uniform(graph.n_nodes(), d, 1.0, &mut rng);
    GradFixture {
        graph,
        ctx,
        params,
        weights,
    }
}

fn weighted_sum(tape: &mut Tape, x: Var, weights: &Matrix) -> Var {
    let w = tape.leaf(weights.clone());
    let p = tape.mul(x, w);
    tape.sum_all(p)
}

type LossFn<'a> = dyn Fn(&mut Tape, &ModelParams<Var>) -> Var + 'a;

fn loss_value(params: &ModelParams, loss: &LossFn) -> f64 {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let out = loss(&mut tape, &vars);
    tape.value(out).item()
}

/// Largest per-tensor relative error between tape gradients and central
/// differences, `|g - g_fd| / max(|g|, |g_fd|)` in the Frobenius norm.
pub fn max_gradient_error(params: &ModelParams, loss: &LossFn) -> (f64, String) {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let out = loss(&mut tape, &vars);
    let grads = tape.backward(out);
    let shape = params.shape();
    let base: BTreeMap<String, Matrix> = params.named().into_iter().collect();
    let mut worst = (0.0, String::new());
    for ((name, value), (_, var)) in params.named().into_iter().zip(vars.named()) {
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()));
        let mut numeric = Matrix::zeros(value.rows(), value.cols());
        for i in 0..value.len() {
            let probe = |delta: f64| {
                let mut tensors = base.clone();
                tensors.get_mut(&name).unwrap().data_mut()[i] += delta;
                loss_value(&ModelParams::from_named(shape, &tensors).unwrap(), loss)
            };
            numeric.data_mut()[i] = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
        }
        let norm = |m: &Matrix| m.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        let err = if scale < 1e-9 {
            0.0
        } else {
            norm(&analytic.zip_map(&numeric, |a, b| a - b)) / scale
        };
        if err > worst.0 {
            worst = (err, name);
        }
    }
    worst
}

/// One row per component: (component, worst relative error, worst tensor).
pub fn gradient_suite() -> Vec<(String, f64, String)> {
    let mut rows = Vec::new();
    let mut push = |name: &str, r: (f64, String)| rows.push((name.to_string(), r.0, r.1));

    for (label, mode) in [("encoder/linear", EncoderMode::Linear), ("encoder/bilstm", EncoderMode::Bilstm)] {
        let fx = fixture(mode, 11);
        let loss = |tape: &mut Tape, p: &ModelParams<Var>| {
            let h = fx.ctx.content.encode(tape, &p.encoder);
            weighted_sum(tape, h, &fx.weights)
        };
        push(label, max_gradient_error(&fx.params, &loss));
    }

    let fx = fixture(EncoderMode::Linear, 12);
    let attention = |tape: &mut Tape, p: &ModelParams<Var>| {
        let h = fx.ctx.content.encode(tape, &p.encoder);
        let scope = vec![None; fx.ctx.paths.len()];
        let view = metapath_view_tape(tape, h, &fx.ctx.paths, &p.attention, &scope, fx.ctx.n_nodes, Activation::Elu);
        weighted_sum(tape, view.h, &fx.weights)
    };
    push("attention", max_gradient_error(&fx.params, &attention));

    let gcn = |tape: &mut Tape, p: &ModelParams<Var>| {
        let h = fx.ctx.content.encode(tape, &p.encoder);
        let g = gcn_forward_tape(tape, &fx.ctx.adjacency, h, &p.gcn, Activation::Relu);
        weighted_sum(tape, g, &fx.weights)
    };
    push("gcn", max_gradient_error(&fx.params, &gcn));

    let pairs = [(0usize, 4usize), (1, 5), (3, 6), (2, 7), (4, 5)];
    let decoder = |tape: &mut Tape, p: &ModelParams<Var>| {
        let h = fx.ctx.content.encode(tape, &p.encoder);
        let left = tape.gather_rows(h, Arc::new(pairs.iter().map(|x| x.0).collect()));
        let right = tape.gather_rows(h, Arc::new(pairs.iter().map(|x| x.1).collect()));
        let probs = decode_tape(tape, left, right, &p.decoder);
        let w = Matrix::col_vector(&[0.3, -1.2, 0.8, 0.5, -0.4]);
        weighted_sum(tape, probs, &w)
    };
    push("decoder", max_gradient_error(&fx.params, &decoder));

    for (label, mode) in [("joint/linear", EncoderMode::Linear), ("joint/bilstm", EncoderMode::Bilstm)] {
        let fx = fixture(mode, 13);
        let hyper = Hyperparams {
            tau: 0.5,
            ..Default::default()
        };
        let batch: Vec<usize> = vec![0, 1, 2, 4, 5, 6];
        let item = |a: usize, negs: &[usize]| ContrastItem {
            anchor: a,
            positive: a,
            negatives: negs.to_vec(),
        };
        let items_mp = vec![item(0, &[1, 3]), item(2, &[0, 1]), item(4, &[5, 7]), item(6, &[4])];
        let items_gcn = vec![item(1, &[2, 3]), item(5, &[6, 4])];
        let edges = EdgeBatch {
            positives: vec![(0, 4), (3, 7)],
            negatives: vec![(2, 4), (0, 7)],
        };
        let loss = |tape: &mut Tape, p: &ModelParams<Var>| {
            joint_loss_tape(tape, p, &fx.ctx, &batch, &items_mp, &items_gcn, &edges, &hyper, Activations::default())
                .expect("joint loss")
                .total
        };
        push(label, max_gradient_error(&fx.params, &loss));
    }
    rows
}

/// Every 2-hop walk target -> middle -> end over statement-table edges,
/// read straight from the edge list, plus the self-reference.
pub fn brute_force_neighborhood(graph: &HeteroGraph, target: usize) -> Vec<Occurrence> {
    let adjacent = |v: usize| -> Vec<usize> {
        graph
            .edges_st
            .iter()
            .filter_map(|e| {
                if e.src == v {
                    Some(e.dst)
                } else if e.dst == v {
                    Some(e.src)
                } else {
                    None
                }
            })
            .collect()
    };
    let mut out = vec![Occurrence {
        node: target,
        instance: None,
    }];
    for m in adjacent(target) {
        for e in adjacent(m) {
            let inst = Some((target, m, e));
            out.push(Occurrence { node: m, instance: inst });
            out.push(Occurrence { node: e, instance: inst });
        }
    }
    out.sort();
    out
}

/// Random graph on at most 50 nodes with every edge type.
pub fn random_graph(rng: &mut ChaCha8Rng) -> HeteroGraph {
    let ns = rng.gen_range(1..=25);
    let nt = rng.gen_range(1..=25);
    let p = rng.gen_range(0.02..0.4);
    let mut st = Vec::new();
    for s in 0..ns {
        for t in 0..nt {
            if rng.gen_bool(p) {
                st.push(edge(s, t, rng.gen_range(0.01..1.0)));
            }
        }
    }
    let same = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.gen_bool(p) {
                    out.push(edge(a, b, rng.gen_range(0.01..1.0)));
                }
            }
        }
        out
    };
    let ss = same(ns, rng);
    let tt = same(nt, rng);
    HeteroGraph::from_parts(
        (0..ns).map(|i| format!("s{i}")).collect(),
        (0..nt).map(|i| format!("t{i}")).collect(),
        st,
        ss,
        tt,
    )
    .expect("random graph")
}

/// Compares every node's enumerated neighborhood with the brute-force walk
/// list; returns the number of mismatching neighborhoods.
pub fn metapath_mismatches(graph: &HeteroGraph) -> usize {
    let mut bad = 0;
    for v in 0..graph.n_nodes() {
        let path = match graph.kind(v) {
            NodeKind::Statement => MetaPath::Sts,
            NodeKind::Table => MetaPath::Tst,
        };
        let mut got = graph.enumerate_metapath_neighbors(path, v).expect("endpoint").occurrences;
        got.sort();
        if got != brute_force_neighborhood(graph, v) {
            bad += 1;
        }
    }
    bad
}

/// The worked example: statements s1..s4, tables t1..t5, with an
/// s1-t5-s4 instance among others.
pub fn worked_example_graph() -> HeteroGraph {
    let s = |i: usize| i - 1;
    let t = |i: usize| i - 1;
    HeteroGraph::from_parts(
        (1..=4).map(|i| format!("s{i}")).collect(),
        (1..=5).map(|i| format!("t{i}")).collect(),
        vec![
            edge(s(1), t(2), 1.0),
            edge(s(1), t(5), 1.0),
            edge(s(2), t(1), 1.0),
            edge(s(3), t(3), 1.0),
            edge(s(4), t(5), 1.0),
            edge(s(4), t(4), 1.0),
        ],
        vec![edge(s(1), s(2), 0.5)],
        vec![edge(t(3), t(4), 0.5)],
    )
    .expect("example graph")
}

/// True when `s1`'s S-T-S neighborhood holds `t5` and `s4` from the
/// instance s1-t5-s4.
pub fn worked_example_holds() -> bool {
    let g = worked_example_graph();
    let s1 = g.statement_node("s1").unwrap();
    let s4 = g.statement_node("s4").unwrap();
    let t5 = g.table_node("t5").unwrap();
    let n = g.enumerate_metapath_neighbors(MetaPath::Sts, s1).unwrap();
    let inst = Some((s1, t5, s4));
    let has = |node| n.occurrences.contains(&Occurrence { node, instance: inst });
    has(t5) && has(s4)
}

/// Normalized InfoNCE by hand: `sum_i -ln(e^{p_i/tau} / sum_j e^{x_ij/tau})`
/// over `sum_i ln(n_i + 1)`.
pub fn normalized_info_nce_oracle(pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let mut raw = 0.0;
    let mut norm = 0.0;
    for (p, ns) in pos.iter().zip(negs) {
        let denom: f64 = (p / tau).exp() + ns.iter().map(|x| (x / tau).exp()).sum::<f64>();
        raw += -((p / tau).exp() / denom).ln();
        norm += ((ns.len() + 1) as f64).ln();
    }
    raw / norm
}
