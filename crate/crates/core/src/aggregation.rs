//! The two aggregation views: meta-path attention (node level, then path
//! level) and stacked GCN propagation over the normalized adjacency.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{softmax_in_place, Activation, AttentionGroups, Tape, Var};
use crate::error::{Error, Result};
use crate::graphgen::{MetaPath, MetaPathNeighborhood};
use crate::tensor::{dot, Matrix, SparseMatrix};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Nonlinearities of the two views; tests swap in `Identity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Activations {
    pub attention: Activation,
    pub gcn: Activation,
}

impl Default for Activations {
    fn default() -> Self {
        Self {
            attention: Activation::Elu,
            gcn: Activation::Relu,
        }
    }
}

/// Row-vector layout: `omega = mean_v tanh(h_v w0 + b0) q0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Matrix> {
    /// `1 x 2d`, statement-table-statement
    pub sts: T,
    /// `1 x 2d`, table-statement-table
    pub tst: T,
    /// `d x 1`
    pub q0: T,
    /// `d x d`
    pub w0: T,
    /// `1 x d`
    pub b0: T,
}

impl<T> AttentionParams<T> {
    pub fn path_vector(&self, path: MetaPath) -> &T {
        match path {
            MetaPath::Sts => &self.sts,
            MetaPath::Tst => &self.tst,
        }
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            sts: f(&format!("{prefix}.sts"), &self.sts),
            tst: f(&format!("{prefix}.tst"), &self.tst),
            q0: f(&format!("{prefix}.q0"), &self.q0),
            w0: f(&format!("{prefix}.w0"), &self.w0),
            b0: f(&format!("{prefix}.b0"), &self.b0),
        }
    }
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            sts: Matrix::uniform(1, 2 * d, bound, rng),
            tst: Matrix::uniform(1, 2 * d, bound, rng),
            q0: Matrix::uniform(d, 1, bound, rng),
            w0: Matrix::uniform(d, d, bound, rng),
            b0: Matrix::uniform(1, d, bound, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams<T = Matrix> {
    pub layers: Vec<T>,
}

impl<T> GcnParams<T> {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> GcnParams<U> {
        GcnParams {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, w)| f(&format!("{prefix}.layer{l}"), w))
                .collect(),
        }
    }
}

impl GcnParams {
    pub fn init<R: Rng + ?Sized>(d: usize, depth: usize, rng: &mut R) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("GCN depth must be at least 1".into()));
        }
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            layers: (0..depth).map(|_| Matrix::uniform(d, d, bound, rng)).collect(),
        })
    }
}

fn occurrence_scores(target: usize, nbhd: &MetaPathNeighborhood, content: &Matrix, a: &[f64]) -> Result<Vec<f64>> {
    let d = content.cols();
    if a.len() != 2 * d {
        return Err(Error::DimensionMismatch {
            expected: 2 * d,
            actual: a.len(),
        });
    }
    if nbhd.occurrences.is_empty() {
        return Err(Error::InvalidArgument(format!("empty neighborhood for node {target}")));
    }
    let base = dot(&a[..d], content.row(target));
    Ok(nbhd
        .occurrences
        .iter()
        .map(|o| Activation::LeakyRelu(LEAKY_SLOPE).apply(base + dot(&a[d..], content.row(o.node))))
        .collect())
}

/// Softmax attention over the occurrences of `nbhd`, one weight each.
pub fn node_attention_weights(
    target: usize,
    nbhd: &MetaPathNeighborhood,
    content: &Matrix,
    a_path: &[f64],
) -> Result<Vec<f64>> {
    let mut w = occurrence_scores(target, nbhd, content, a_path)?;
    softmax_in_place(&mut w);
    Ok(w)
}

/// `sigma(sum_o alpha_o h_o)` over the occurrences of `nbhd`.
pub fn aggregate_path(
    target: usize,
    nbhd: &MetaPathNeighborhood,
    content: &Matrix,
    a_path: &[f64],
    sigma: Activation,
) -> Result<Vec<f64>> {
    let w = node_attention_weights(target, nbhd, content, a_path)?;
    let mut out = vec![0.0; content.cols()];
    for (o, wi) in nbhd.occurrences.iter().zip(&w) {
        for (x, h) in out.iter_mut().zip(content.row(o.node)) {
            *x += wi * h;
        }
    }
    Ok(out.into_iter().map(|x| sigma.apply(x)).collect())
}

/// Path-specific embeddings of the nodes that are endpoints of one path.
#[derive(Clone, Debug)]
pub struct PathEmbeddings {
    pub nodes: Vec<usize>,
    /// one row per entry of `nodes`
    pub h: Matrix,
}

/// Path-level attention. Each path's score is averaged over its own rows;
/// node `v` combines the paths it belongs to. Returns `(beta, n_nodes x d)`.
pub fn path_attention(
    per_path: &[PathEmbeddings],
    n_nodes: usize,
    params: &AttentionParams,
    sigma: Activation,
) -> Result<(Vec<f64>, Matrix)> {
    let Some(first) = per_path.first() else {
        return Err(Error::InvalidArgument("path attention needs at least one path".into()));
    };
    let d = first.h.cols();
    let mut beta = Vec::with_capacity(per_path.len());
    for p in per_path {
        if p.h.cols() != d || p.h.rows() != p.nodes.len() {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: p.h.cols(),
            });
        }
        beta.push(path_score(&p.h, params));
    }
    softmax_in_place(&mut beta);
    let mut out = Matrix::zeros(n_nodes, d);
    for (p, &b) in per_path.iter().zip(&beta) {
        for (r, &v) in p.nodes.iter().enumerate() {
            for (o, x) in out.row_mut(v).iter_mut().zip(p.h.row(r)) {
                *o += b * x;
            }
        }
    }
    Ok((beta, out.map(|x| sigma.apply(x))))
}

/// `omega` for one path: mean over rows of `q0 . tanh(h w0 + b0)`.
pub fn path_score(h: &Matrix, params: &AttentionParams) -> f64 {
    if h.rows() == 0 {
        return 0.0;
    }
    let mut z = h.matmul(&params.w0);
    for r in 0..z.rows() {
        for (x, b) in z.row_mut(r).iter_mut().zip(params.b0.data()) {
            *x = (*x + b).tanh();
        }
    }
    z.matmul(&params.q0).sum() / h.rows() as f64
}

/// `r` rounds of `H <- sigma(A H W)`.
pub fn gcn_forward(adjacency: &SparseMatrix, h0: &Matrix, params: &GcnParams, sigma: Activation) -> Result<Matrix> {
    if adjacency.n_cols() != h0.rows() {
        return Err(Error::DimensionMismatch {
            expected: adjacency.n_cols(),
            actual: h0.rows(),
        });
    }
    let mut h = h0.clone();
    for w in &params.layers {
        if w.rows() != h.cols() {
            return Err(Error::DimensionMismatch {
                expected: h.cols(),
                actual: w.rows(),
            });
        }
        h = adjacency.matmul_dense(&h.matmul(w)).map(|x| sigma.apply(x));
    }
    Ok(h)
}

pub fn gcn_forward_tape(
    tape: &mut Tape,
    adjacency: &Arc<SparseMatrix>,
    h0: Var,
    params: &GcnParams<Var>,
    sigma: Activation,
) -> Var {
    let mut h = h0;
    for &w in &params.layers {
        let hw = tape.matmul(h, w);
        let ah = tape.sparse_matmul(adjacency.clone(), hw);
        h = tape.act(ah, sigma);
    }
    h
}

/// Node-level attention inputs of one path, over all its target nodes.
#[derive(Clone, Debug)]
pub struct PathGroups {
    pub path: MetaPath,
    pub groups: Arc<AttentionGroups>,
}

impl PathGroups {
    pub fn from_neighborhoods(path: MetaPath, nbhds: &[MetaPathNeighborhood]) -> Self {
        let groups = AttentionGroups {
            targets: nbhds.iter().map(|n| n.target).collect(),
            occurrences: nbhds.iter().map(MetaPathNeighborhood::nodes).collect(),
        };
        Self {
            path,
            groups: Arc::new(groups),
        }
    }
}

/// Output of the meta-path view on a tape.
pub struct MetaPathView {
    /// `n_nodes x d`
    pub h: Var,
    /// `1 x |paths|`
    pub beta: Var,
    /// per path, rows aligned with that path's targets
    pub per_path: Vec<Var>,
    pub node_level: Vec<Var>,
}

/// Meta-path view on a tape. `omega_scope[i]`, when given, lists positions
/// within path `i`'s targets to average its score over (a training batch);
/// otherwise all its targets are used.
pub fn metapath_view_tape(
    tape: &mut Tape,
    content: Var,
    paths: &[PathGroups],
    params: &AttentionParams<Var>,
    omega_scope: &[Option<Arc<Vec<usize>>>],
    n_nodes: usize,
    sigma: Activation,
) -> MetaPathView {
    assert!(!paths.is_empty(), "meta-path view needs at least one path");
    let mut per_path = Vec::with_capacity(paths.len());
    let mut node_level = Vec::with_capacity(paths.len());
    let mut omegas = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let agg = tape.segment_attention(content, *params.path_vector(p.path), p.groups.clone(), LEAKY_SLOPE);
        node_level.push(agg);
        let hp = tape.act(agg, sigma);
        per_path.push(hp);
        let scoped = match omega_scope.get(i).cloned().flatten() {
            Some(idx) if !idx.is_empty() => tape.gather_rows(hp, idx),
            _ => hp,
        };
        let omega = if tape.value(scoped).rows() == 0 {
            tape.leaf(Matrix::scalar(0.0))
        } else {
            let z = tape.matmul(scoped, params.w0);
            let z = tape.add_row(z, params.b0);
            let z = tape.act(z, Activation::Tanh);
            let s = tape.matmul(z, params.q0);
            tape.mean_all(s)
        };
        omegas.push(omega);
    }
    let omega = tape.concat_cols(&omegas);
    let beta = tape.softmax_rows(omega);
    let mut acc: Option<Var> = None;
    for (i, (p, &hp)) in paths.iter().zip(&per_path).enumerate() {
        let b = tape.slice_cols(beta, i, 1);
        let weighted = tape.scale_by(hp, b);
        let placed = tape.scatter_rows(weighted, Arc::new(p.groups.targets.clone()), n_nodes);
        acc = Some(match acc {
            None => placed,
            Some(a) => tape.add(a, placed),
        });
    }
    let h = tape.act(acc.expect("at least one path"), sigma);
    MetaPathView {
        h,
        beta,
        per_path,
        node_level,
    }
}
