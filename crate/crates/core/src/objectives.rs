//! Training objectives: cross-view contrastive loss normalized by its
//! all-equal value, masked edge reconstruction and their weighted sum.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{sigmoid, Activation, ContrastItem, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{cosine, Matrix};

/// Probability clamp used before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Two-layer perceptron `R^d -> R^d -> R` over `h ∘ h'`, ELU hidden layer and
/// sigmoid output. Row-vector layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T = Matrix> {
    /// `d x d`
    pub w1: T,
    /// `1 x d`
    pub b1: T,
    /// `d x 1`
    pub w2: T,
    /// `1 x 1`
    pub b2: T,
}

impl<T> MlpParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> MlpParams<U> {
        MlpParams {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }
}

impl MlpParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            w1: Matrix::uniform(d, d, bound, rng),
            b1: Matrix::uniform(1, d, bound, rng),
            w2: Matrix::uniform(d, 1, bound, rng),
            b2: Matrix::uniform(1, 1, bound, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, d),
            b1: Matrix::zeros(1, d),
            w2: Matrix::zeros(d, 1),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    /// Probability for each row of `products` (rows are `h ∘ h'`).
    pub fn forward(&self, products: &Matrix) -> Vec<f64> {
        let mut hidden = products.matmul(&self.w1);
        for r in 0..hidden.rows() {
            for (x, b) in hidden.row_mut(r).iter_mut().zip(self.b1.data()) {
                *x = Activation::Elu.apply(*x + b);
            }
        }
        hidden
            .matmul(&self.w2)
            .data()
            .iter()
            .map(|z| sigmoid(z + self.b2.item()))
            .collect()
    }
}

/// `sigmoid(MLP(u ∘ w))`.
pub fn decode_edge(u: &[f64], w: &[f64], decoder: &MlpParams) -> Result<f64> {
    let d = decoder.dim();
    if u.len() != d || w.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: if u.len() != d { u.len() } else { w.len() },
        });
    }
    let prod: Vec<f64> = u.iter().zip(w).map(|(a, b)| a * b).collect();
    Ok(decoder.forward(&Matrix::row_vector(&prod))[0])
}

/// Decoder probabilities for row pairs of `left` and `right`, `m x 1`.
pub fn decode_tape(tape: &mut Tape, left: Var, right: Var, decoder: &MlpParams<Var>) -> Var {
    let prod = tape.mul(left, right);
    let z = tape.matmul(prod, decoder.w1);
    let z = tape.add_row(z, decoder.b1);
    let z = tape.act(z, Activation::Elu);
    let z = tape.matmul(z, decoder.w2);
    let z = tape.add_row(z, decoder.b2);
    tape.act(z, Activation::Sigmoid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewDirection {
    /// anchors from the meta-path view, candidates from the GCN view
    MetaPath,
    /// anchors from the GCN view, candidates from the meta-path view
    Gcn,
}

/// Both views' embeddings for the nodes of a batch plus per-direction
/// negatives. Rows index nodes; every item's `positive` equals its `anchor`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub h_metapath: Matrix,
    pub h_gcn: Matrix,
    pub items_metapath: Vec<ContrastItem>,
    pub items_gcn: Vec<ContrastItem>,
    pub tau: f64,
    pub lambda: f64,
}

/// `sum_anchors ln(|negatives| + 1)`, the loss value when all similarities tie.
pub fn contrastive_normalizer(items: &[ContrastItem]) -> f64 {
    items.iter().map(|i| (i.negatives.len() as f64 + 1.0).ln()).sum()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// Normalized InfoNCE for one direction.
pub fn contrastive_view_loss(batch: &ContrastiveBatch, direction: ViewDirection) -> Result<f64> {
    check_tau(batch.tau)?;
    let (anchors, others, items) = match direction {
        ViewDirection::MetaPath => (&batch.h_metapath, &batch.h_gcn, &batch.items_metapath),
        ViewDirection::Gcn => (&batch.h_gcn, &batch.h_metapath, &batch.items_gcn),
    };
    let norm = contrastive_normalizer(items);
    if norm <= 0.0 {
        return Err(Error::InvalidArgument("contrastive batch has no anchor with negatives".into()));
    }
    let mut raw = 0.0;
    for item in items.iter().filter(|i| !i.negatives.is_empty()) {
        let a = anchors.row(item.anchor);
        let logits: Vec<f64> = std::iter::once(item.positive)
            .chain(item.negatives.iter().copied())
            .map(|c| cosine(a, others.row(c)) / batch.tau)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        raw += lse - logits[0];
    }
    Ok(raw / norm)
}

/// `lambda * L_metapath + (1 - lambda) * L_gcn`.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    if !(0.0..=1.0).contains(&batch.lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {}", batch.lambda)));
    }
    let lp = contrastive_view_loss(batch, ViewDirection::MetaPath)?;
    let lr = contrastive_view_loss(batch, ViewDirection::Gcn)?;
    Ok(mix_views(lp, lr, batch.lambda))
}

pub fn mix_views(metapath: f64, gcn: f64, lambda: f64) -> f64 {
    lambda * metapath + (1.0 - lambda) * gcn
}

/// Normalized one-direction loss on a tape. Items without negatives are dropped.
pub fn contrastive_view_loss_tape(
    tape: &mut Tape,
    anchors: Var,
    others: Var,
    items: &[ContrastItem],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let kept: Vec<ContrastItem> = items.iter().filter(|i| !i.negatives.is_empty()).cloned().collect();
    let norm = contrastive_normalizer(&kept);
    if norm <= 0.0 {
        return Err(Error::InvalidArgument("contrastive batch has no anchor with negatives".into()));
    }
    let raw = tape.info_nce(anchors, others, Arc::new(kept), tau);
    Ok(tape.scale(raw, 1.0 / norm))
}

/// Masked positive edges and an equal number of sampled non-edges, as
/// unified node-index pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeBatch {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// `-(mean ln p_pos + mean ln(1 - p_neg))` with clamping.
pub fn reconstruction_bce(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::InvalidArgument("edge reconstruction needs at least one positive".into()));
    }
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let lp = pos.iter().map(|&p| clamp(p).ln()).sum::<f64>() / pos.len() as f64;
    let ln = if neg.is_empty() {
        0.0
    } else {
        neg.iter().map(|&p| (1.0 - clamp(p)).ln()).sum::<f64>() / neg.len() as f64
    };
    Ok(-(lp + ln))
}

/// `ln(1 + bce)`.
pub fn smooth_reconstruction(bce: f64) -> f64 {
    bce.ln_1p()
}

/// Reconstruction loss of `batch` with embeddings indexed by node.
pub fn edge_reconstruction_loss(batch: &EdgeBatch, embeddings: &Matrix, decoder: &MlpParams) -> Result<f64> {
    let prob = |pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|&(a, b)| decode_edge(embeddings.row(a), embeddings.row(b), decoder))
            .collect()
    };
    Ok(smooth_reconstruction(reconstruction_bce(&prob(&batch.positives)?, &prob(&batch.negatives)?)?))
}

/// Reconstruction loss on a tape over node embeddings `h` (`n x d`).
pub fn edge_reconstruction_loss_tape(tape: &mut Tape, h: Var, batch: &EdgeBatch, decoder: &MlpParams<Var>) -> Result<Var> {
    if batch.positives.is_empty() {
        return Err(Error::InvalidArgument("edge reconstruction needs at least one positive".into()));
    }
    let pairs: Vec<(usize, usize)> = batch.positives.iter().chain(&batch.negatives).copied().collect();
    let left = tape.gather_rows(h, Arc::new(pairs.iter().map(|p| p.0).collect()));
    let right = tape.gather_rows(h, Arc::new(pairs.iter().map(|p| p.1).collect()));
    let probs = decode_tape(tape, left, right, decoder);
    let bce = tape.bce_means(probs, batch.positives.len(), PROB_EPS);
    let shifted = tape.add_scalar(bce, 1.0);
    Ok(tape.ln(shifted))
}

/// `L_ER + beta * L_CL`.
pub fn joint_loss(l_er: f64, l_cl: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {beta}")));
    }
    Ok(l_er + beta * l_cl)
}
