//! A small reverse-mode differentiation tape over [`Matrix`] values.
//!
//! Every model component (content encoders, meta-path attention, GCN
//! propagation, decoder, losses) is expressed as tape operations, so a single
//! `backward` call yields exact gradients for every parameter leaf. The
//! fused operations ([`Tape::segment_attention`], [`Tape::info_nce`],
//! [`Tape::bce_means`]) carry hand-derived adjoints; the finite-difference
//! suites in the test tree check all of them.

use std::sync::Arc;

use crate::tensor::{dot, Matrix, SparseMatrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    /// ELU with alpha = 1.
    Elu,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative given the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Occurrence lists for [`Tape::segment_attention`]: output row `i` attends
/// from `targets[i]` over the rows listed in `occurrences[i]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionGroups {
    pub targets: Vec<usize>,
    pub occurrences: Vec<Vec<usize>>,
}

/// One anchor of an InfoNCE term: the anchor row, its positive row in the
/// other view and its negatives (rows of the other view).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastItem {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Act(Var, Activation),
    Ln(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterRows(Var, Arc<Vec<usize>>),
    SparseMatMul(Arc<SparseMatrix>, Var),
    SumAll(Var),
    SoftmaxRows(Var),
    RowL2Normalize(Var),
    SegmentAttention {
        h: Var,
        a: Var,
        groups: Arc<AttentionGroups>,
        slope: f64,
        weights: Vec<Vec<f64>>,
        pre: Vec<Vec<f64>>,
    },
    InfoNce {
        anchors: Var,
        others: Var,
        items: Arc<Vec<ContrastItem>>,
        tau: f64,
    },
    BceMeans {
        probs: Var,
        n_pos: usize,
        eps: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `v`, or `None`
    /// when `v` did not influence it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// `a (n x c) + b (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row bias must be a row vector");
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        let bias = bias.row(0).to_vec();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).scale(alpha);
        self.push(v, Op::Scale(a, alpha))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// Every entry of `a` times the 1x1 value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let factor = self.value(s).item();
        let v = self.value(a).scale(factor);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        if f == Activation::Identity {
            return a;
        }
        let v = self.value(a).map(|x| f.apply(x));
        self.push(v, Op::Act(a, f))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols(), "slice out of range");
        let mut v = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            v.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = self.value(a).gather_rows(&idx);
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Output with `n_out` rows where row `idx[i]` accumulates input row `i`.
    pub fn scatter_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, n_out: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), idx.len(), "scatter index length mismatch");
        let mut v = Matrix::zeros(n_out, src.cols());
        for (i, &dst) in idx.iter().enumerate() {
            for (o, s) in v.row_mut(dst).iter_mut().zip(src.row(i)) {
                *o += s;
            }
        }
        self.push(v, Op::ScatterRows(a, idx))
    }

    pub fn sparse_matmul(&mut self, s: Arc<SparseMatrix>, a: Var) -> Var {
        let v = s.matmul_dense(self.value(a));
        self.push(v, Op::SparseMatMul(s, a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Rows scaled to unit L2 norm (zero rows pass through unchanged).
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let v = self.value(a).l2_normalize_rows();
        self.push(v, Op::RowL2Normalize(a))
    }

    /// Attention-weighted neighbor sums. For output row `i` with target `v`
    /// and occurrence rows `u_1..u_m`, scores are
    /// `LeakyReLU(a[..d]·h_v + a[d..]·h_u)`, softmax-normalized over the
    /// occurrences, and the output is `sum_o alpha_o h_{u_o}`.
    /// `a` is a `1 x 2d` row vector.
    pub fn segment_attention(&mut self, h: Var, a: Var, groups: Arc<AttentionGroups>, slope: f64) -> Var {
        let hm = self.value(h);
        let av = self.value(a);
        let d = hm.cols();
        assert_eq!(av.len(), 2 * d, "attention vector must have length 2d");
        assert_eq!(groups.targets.len(), groups.occurrences.len());
        let (a_self, a_nb) = av.data().split_at(d);
        let mut out = Matrix::zeros(groups.targets.len(), d);
        let mut weights = Vec::with_capacity(groups.targets.len());
        let mut pre = Vec::with_capacity(groups.targets.len());
        for (i, (&t, occ)) in groups.targets.iter().zip(&groups.occurrences).enumerate() {
            assert!(!occ.is_empty(), "attention over an empty neighborhood");
            let base = dot(a_self, hm.row(t));
            let z: Vec<f64> = occ.iter().map(|&u| base + dot(a_nb, hm.row(u))).collect();
            let mut w: Vec<f64> = z.iter().map(|&x| Activation::LeakyRelu(slope).apply(x)).collect();
            softmax_in_place(&mut w);
            let row = out.row_mut(i);
            for (&u, &wi) in occ.iter().zip(&w) {
                for (o, x) in row.iter_mut().zip(hm.row(u)) {
                    *o += wi * x;
                }
            }
            weights.push(w);
            pre.push(z);
        }
        self.push(
            out,
            Op::SegmentAttention {
                h,
                a,
                groups,
                slope,
                weights,
                pre,
            },
        )
    }

    /// Attention weights computed by the most recent `segment_attention`
    /// node `v`.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::SegmentAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Raw InfoNCE sum `sum_i -log(exp(s_pos/tau) / sum_{c in pos+negs} exp(s_c/tau))`
    /// with cosine similarity `s` between anchor rows and rows of `others`.
    pub fn info_nce(&mut self, anchors: Var, others: Var, items: Arc<Vec<ContrastItem>>, tau: f64) -> Var {
        let am = self.value(anchors);
        let om = self.value(others);
        let mut total = 0.0;
        for item in items.iter() {
            let sims = candidate_sims(am.row(item.anchor), om, item);
            total += nce_term(&sims, tau).0;
        }
        self.push(
            Matrix::scalar(total),
            Op::InfoNce {
                anchors,
                others,
                items,
                tau,
            },
        )
    }

    /// `-(mean_{pos} ln p + mean_{neg} ln(1-p))` over a column of
    /// probabilities whose first `n_pos` rows are positives. Probabilities are
    /// clamped to `[eps, 1-eps]`.
    pub fn bce_means(&mut self, probs: Var, n_pos: usize, eps: f64) -> Var {
        let p = self.value(probs);
        let value = bce_means_value(p.data(), n_pos, eps);
        self.push(Matrix::scalar(value), Op::BceMeans { probs, n_pos, eps })
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b));
                let gb = self.value(*a).t_matmul(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, alpha) => accumulate(grads, *a, g.scale(*alpha)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s).item();
                accumulate(grads, *a, g.scale(factor));
                let gs = dot(g.data(), self.value(*a).data());
                accumulate(grads, *s, Matrix::scalar(gs));
            }
            Op::Act(a, f) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = g.clone();
                for ((o, &xi), &yi) in ga.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *o *= f.derivative(xi, yi);
                }
                accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = g.zip_map(self.value(*a), |gi, x| gi / x);
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                let len = g.cols();
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    let mut gp = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    accumulate(grads, *p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let idx: Vec<usize> = (offset..offset + rows).collect();
                    accumulate(grads, *p, g.gather_rows(&idx));
                    offset += rows;
                }
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (i, &s) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(s).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterRows(a, idx) => accumulate(grads, *a, g.gather_rows(idx)),
            Op::SparseMatMul(s, a) => accumulate(grads, *a, s.t_matmul_dense(g)),
            Op::SumAll(a) => {
                let src = self.value(*a);
                accumulate(grads, *a, Matrix::filled(src.rows(), src.cols(), g.item()));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = dot(yr, gr);
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - inner);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RowL2Normalize(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = dot(x.row(r), x.row(r)).sqrt();
                    if norm == 0.0 {
                        ga.row_mut(r).copy_from_slice(g.row(r));
                        continue;
                    }
                    let proj = dot(y.row(r), g.row(r));
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = (gi - proj * yi) / norm;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SegmentAttention {
                h,
                a,
                groups,
                slope,
                weights,
                pre,
            } => {
                let hm = self.value(*h);
                let av = self.value(*a);
                let d = hm.cols();
                let (a_self, a_nb) = av.data().split_at(d);
                let mut gh = Matrix::zeros(hm.rows(), d);
                let mut ga = vec![0.0; 2 * d];
                for (i, (&t, occ)) in groups.targets.iter().zip(&groups.occurrences).enumerate() {
                    let gi = g.row(i);
                    let w = &weights[i];
                    let z = &pre[i];
                    let dalpha: Vec<f64> = occ.iter().map(|&u| dot(gi, hm.row(u))).collect();
                    let mean = dot(w, &dalpha);
                    let mut dz_sum = 0.0;
                    for (o, &u) in occ.iter().enumerate() {
                        // value path
                        for (gv, &x) in gh.row_mut(u).iter_mut().zip(gi) {
                            *gv += w[o] * x;
                        }
                        let de = w[o] * (dalpha[o] - mean);
                        let dz = de * if z[o] > 0.0 { 1.0 } else { *slope };
                        dz_sum += dz;
                        let hu = hm.row(u).to_vec();
                        for (k, x) in hu.iter().enumerate() {
                            ga[d + k] += dz * x;
                        }
                        for (gv, &ak) in gh.row_mut(u).iter_mut().zip(a_nb) {
                            *gv += dz * ak;
                        }
                    }
                    let ht = hm.row(t).to_vec();
                    for (k, x) in ht.iter().enumerate() {
                        ga[k] += dz_sum * x;
                    }
                    for (gv, &ak) in gh.row_mut(t).iter_mut().zip(a_self) {
                        *gv += dz_sum * ak;
                    }
                }
                accumulate(grads, *h, gh);
                accumulate(grads, *a, Matrix::from_vec(av.rows(), av.cols(), ga));
            }
            Op::InfoNce {
                anchors,
                others,
                items,
                tau,
            } => {
                let scale = g.item();
                let am = self.value(*anchors);
                let om = self.value(*others);
                let mut g_anchor = Matrix::zeros(am.rows(), am.cols());
                let mut g_other = Matrix::zeros(om.rows(), om.cols());
                for item in items.iter() {
                    let u = am.row(item.anchor);
                    let sims = candidate_sims(u, om, item);
                    let (_, dsims) = nce_term(&sims, *tau);
                    let nu = dot(u, u).sqrt();
                    let candidates = std::iter::once(item.positive).chain(item.negatives.iter().copied());
                    for (c, ds) in candidates.zip(dsims) {
                        let w = om.row(c);
                        let nw = dot(w, w).sqrt();
                        if nu == 0.0 || nw == 0.0 {
                            continue;
                        }
                        let s = dot(u, w) / (nu * nw);
                        let coef = scale * ds;
                        let ga = g_anchor.row_mut(item.anchor);
                        for (k, o) in ga.iter_mut().enumerate() {
                            *o += coef * (w[k] / (nu * nw) - s * u[k] / (nu * nu));
                        }
                        let gw: Vec<f64> = (0..w.len())
                            .map(|k| coef * (u[k] / (nu * nw) - s * w[k] / (nw * nw)))
                            .collect();
                        for (o, x) in g_other.row_mut(c).iter_mut().zip(gw) {
                            *o += x;
                        }
                    }
                }
                accumulate(grads, *anchors, g_anchor);
                accumulate(grads, *others, g_other);
            }
            Op::BceMeans { probs, n_pos, eps } => {
                let p = self.value(*probs);
                let n = p.len();
                let n_neg = n - n_pos;
                let scale = g.item();
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                for (i, (o, &pi)) in gp.data_mut().iter_mut().zip(p.data()).enumerate() {
                    let clamped = pi < *eps || pi > 1.0 - eps;
                    if clamped {
                        continue;
                    }
                    *o = if i < *n_pos {
                        -scale / (*n_pos as f64 * pi)
                    } else {
                        scale / (n_neg as f64 * (1.0 - pi))
                    };
                }
                accumulate(grads, *probs, gp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

fn candidate_sims(anchor: &[f64], others: &Matrix, item: &ContrastItem) -> Vec<f64> {
    std::iter::once(item.positive)
        .chain(item.negatives.iter().copied())
        .map(|c| crate::tensor::cosine(anchor, others.row(c)))
        .collect()
}

/// Loss of one anchor given candidate similarities (positive first) and the
/// derivative of that loss with respect to each similarity.
fn nce_term(sims: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[0];
    let grads = logits
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let p = (l - lse).exp();
            (p - if i == 0 { 1.0 } else { 0.0 }) / tau
        })
        .collect();
    (loss, grads)
}

pub(crate) fn bce_means_value(p: &[f64], n_pos: usize, eps: f64) -> f64 {
    let clamp = |x: f64| x.clamp(eps, 1.0 - eps);
    let (pos, neg) = p.split_at(n_pos);
    let pos_mean = if pos.is_empty() {
        0.0
    } else {
        pos.iter().map(|&x| clamp(x).ln()).sum::<f64>() / pos.len() as f64
    };
    let neg_mean = if neg.is_empty() {
        0.0
    } else {
        neg.iter().map(|&x| (1.0 - clamp(x)).ln()).sum::<f64>() / neg.len() as f64
    };
    -(pos_mean + neg_mean)
}
