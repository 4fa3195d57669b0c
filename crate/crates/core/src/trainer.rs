//! Training loop: negative sampling, masked edges, minibatch Adam updates,
//! best-on-validation checkpointing and embedding materialization.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::Activations;
use crate::autodiff::{ContrastItem, Tape, Var};
use crate::corpus::{DataLake, Split, SplitSpec};
use crate::encoder::{extract_all, EncoderMode, HashingFeaturizer, LookupFeaturizer, TextFeaturizer};
use crate::error::{Error, Result};
use crate::graphgen::{HeteroGraph, MetaPath, NodeKind};
use crate::model::{forward, infer, GraphContext, ModelParams, ModelShape};
use crate::objectives::{contrastive_view_loss_tape, decode_edge, edge_reconstruction_loss_tape, EdgeBatch};
use crate::storage;
use crate::tensor::Matrix;

/// All tunable settings of a run. Every field has a default, so a config
/// file only needs the fields it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub d: usize,
    pub d_c: usize,
    pub k: usize,
    pub gcn_depth: usize,
    pub tau: f64,
    pub lambda: f64,
    pub beta: f64,
    pub mask_ratio: f64,
    pub negatives_per_anchor: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub candidate_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub encoder: EncoderMode,
    pub featurizer_seed: u64,
    /// JSON-lines file of precomputed content vectors; hashing otherwise.
    pub embedding_file: Option<PathBuf>,
    pub split: SplitSpec,
    pub classifier_epochs: usize,
    pub classifier_learning_rate: f64,
    pub classifier_negative_ratio: usize,
    pub n_trees: usize,
    pub leaf_capacity: usize,
    pub search_breadth_factor: usize,
    pub top_k: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            d: 128,
            d_c: 256,
            k: 10,
            gcn_depth: 3,
            tau: 0.07,
            lambda: 0.5,
            beta: 0.5,
            mask_ratio: 0.3,
            negatives_per_anchor: 16,
            learning_rate: 8e-4,
            epochs: 50,
            batch_size: 64,
            seed: 7,
            candidate_fraction: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            encoder: EncoderMode::Bilstm,
            featurizer_seed: 17,
            embedding_file: None,
            split: SplitSpec::default(),
            classifier_epochs: 200,
            classifier_learning_rate: 3e-3,
            classifier_negative_ratio: 4,
            n_trees: 10,
            leaf_capacity: 16,
            search_breadth_factor: 10,
            top_k: 10,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, v) in [
            ("d", self.d),
            ("d_c", self.d_c),
            ("k", self.k),
            ("gcn_depth", self.gcn_depth),
            ("negatives_per_anchor", self.negatives_per_anchor),
            ("batch_size", self.batch_size),
            ("n_trees", self.n_trees),
            ("leaf_capacity", self.leaf_capacity),
            ("search_breadth_factor", self.search_breadth_factor),
            ("top_k", self.top_k),
            ("classifier_negative_ratio", self.classifier_negative_ratio),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.encoder == EncoderMode::Bilstm && self.d % 2 != 0 {
            return bad(format!("d must be even for the Bi-LSTM encoder, got {}", self.d));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be nonnegative, got {}", self.beta));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        if !(self.candidate_fraction > 0.0 && self.candidate_fraction <= 1.0) {
            return bad(format!("candidate_fraction must lie in (0, 1], got {}", self.candidate_fraction));
        }
        if !(self.learning_rate >= 0.0) || !(self.classifier_learning_rate >= 0.0) {
            return bad("learning rates must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam moments must lie in [0, 1) and eps must be positive".into());
        }
        self.split.validate()
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            mode: self.encoder,
            d_c: self.d_c,
            d: self.d,
            gcn_depth: self.gcn_depth,
        }
    }

    pub fn featurizer(&self) -> Result<Box<dyn TextFeaturizer>> {
        match &self.embedding_file {
            Some(path) => {
                let f = LookupFeaturizer::load(path, Some(self.featurizer_seed))?;
                if f.dim() != self.d_c {
                    return Err(Error::DimensionMismatch {
                        expected: self.d_c,
                        actual: f.dim(),
                    });
                }
                Ok(Box::new(f))
            }
            None => Ok(Box::new(HashingFeaturizer::new(self.d_c, self.featurizer_seed))),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let h: Self = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        h.validate()?;
        Ok(h)
    }
}

/// Adam with bias-corrected moments, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &Matrix, grad: &Matrix) -> Matrix {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Matrix::zeros(param.rows(), param.cols()), Matrix::zeros(param.rows(), param.cols())));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut out = param.clone();
        for (((p, g), mi), vi) in out
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
        }
        out
    }
}

/// Draws up to `m` same-type negatives per anchor, uniformly without
/// replacement. Anchors whose type has a single member get no item.
pub fn sample_contrastive_negatives<R: Rng + ?Sized>(nodes_by_type: &[Vec<usize>], m: usize, rng: &mut R) -> Vec<ContrastItem> {
    let mut items = Vec::new();
    for nodes in nodes_by_type {
        if nodes.len() < 2 {
            for &v in nodes {
                log::warn!("node {v} has no same-type negatives; skipped as a contrastive anchor");
            }
            continue;
        }
        let take = m.min(nodes.len() - 1);
        for (pos, &v) in nodes.iter().enumerate() {
            let negatives = index::sample(rng, nodes.len() - 1, take)
                .into_iter()
                .map(|i| nodes[if i >= pos { i + 1 } else { i }])
                .collect();
            items.push(ContrastItem {
                anchor: v,
                positive: v,
                negatives,
            });
        }
    }
    items
}

/// Training nodes of a split: statements in the training partition, and
/// tables in the training partition (all tables when tables are unsplit).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainingNodes {
    pub statements: Vec<usize>,
    pub tables: Vec<usize>,
}

impl TrainingNodes {
    pub fn from_split(graph: &HeteroGraph, split: &Split) -> Self {
        let statements = (0..graph.n_statements())
            .filter(|&v| split.statements.train.contains(&graph.statement_ids[v]))
            .collect();
        let tables = (graph.n_statements()..graph.n_nodes())
            .filter(|&v| match &split.tables {
                Some(p) => p.train.contains(graph.node_id(v)),
                None => true,
            })
            .collect();
        Self { statements, tables }
    }

    pub fn all(&self) -> Vec<usize> {
        self.statements.iter().chain(&self.tables).copied().collect()
    }
}

/// Masks each eligible statement-table and table-table edge with
/// probability `p` and pairs every masked edge with a type-matched non-edge.
pub fn sample_edge_batches<R: Rng + ?Sized>(
    graph: &HeteroGraph,
    nodes: &TrainingNodes,
    p: f64,
    rng: &mut R,
) -> Result<EdgeBatch> {
    let train_tables: BTreeSet<usize> = nodes.tables.iter().copied().collect();
    let eligible: Vec<(usize, usize)> = graph
        .edges_st
        .iter()
        .chain(graph.edges_tt.iter().filter(|e| train_tables.contains(&e.src) || train_tables.contains(&e.dst)))
        .map(|e| (e.src, e.dst))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Runtime(
            "no statement-table or table-table edges touch the training nodes; nothing to reconstruct".into(),
        ));
    }
    let mut positives: Vec<(usize, usize)> = eligible.iter().copied().filter(|_| rng.gen_bool(p)).collect();
    if positives.is_empty() {
        positives.push(eligible[rng.gen_range(0..eligible.len())]);
    }
    let mut taken: HashSet<(usize, usize)> = HashSet::new();
    let mut negatives = Vec::with_capacity(positives.len());
    for &(a, b) in &positives {
        let (left, right): (&[usize], &[usize]) = match (graph.kind(a), graph.kind(b)) {
            (NodeKind::Statement, _) => (&nodes.statements, &nodes.tables),
            _ => (&nodes.tables, &nodes.tables),
        };
        let valid = |x: usize, y: usize, taken: &HashSet<(usize, usize)>| {
            x != y && !graph.has_edge(x, y) && !taken.contains(&(x.min(y), x.max(y)))
        };
        let mut pick = None;
        for _ in 0..100 {
            let x = left[rng.gen_range(0..left.len())];
            let y = right[rng.gen_range(0..right.len())];
            if valid(x, y, &taken) {
                pick = Some((x, y));
                break;
            }
        }
        if pick.is_none() {
            let candidates: Vec<(usize, usize)> = left
                .iter()
                .flat_map(|&x| right.iter().map(move |&y| (x, y)))
                .filter(|&(x, y)| valid(x, y, &taken))
                .collect();
            if candidates.is_empty() {
                return Err(Error::Runtime(format!(
                    "negative edge sampling exhausted: every {:?}-{:?} pair among training nodes is connected",
                    graph.kind(a),
                    graph.kind(b)
                )));
            }
            pick = Some(candidates[rng.gen_range(0..candidates.len())]);
        }
        let (x, y) = pick.expect("picked");
        taken.insert((x.min(y), x.max(y)));
        negatives.push((x, y));
    }
    Ok(EdgeBatch { positives, negatives })
}

/// Validation statement-table label pairs and as many sampled unlabeled
/// pairs, both as unified node pairs.
pub fn validation_pairs(lake: &DataLake, graph: &HeteroGraph, split: &Split, seed: u64) -> EdgeBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = graph.n_statements();
    let mut batch = EdgeBatch::default();
    for (s, t) in &lake.nl_table_labels {
        if split.statements.val.contains(s) {
            if let (Some(a), Some(b)) = (graph.statement_node(s), graph.table_node(t)) {
                batch.positives.push((a, b));
            }
        }
    }
    let labeled: HashSet<(usize, usize)> = batch.positives.iter().copied().collect();
    let mut taken = HashSet::new();
    for &(s, _) in &batch.positives {
        let free: Vec<usize> = (ns..graph.n_nodes())
            .filter(|&t| !labeled.contains(&(s, t)) && !taken.contains(&(s, t)))
            .collect();
        if let Some(&t) = free.get(rng.gen_range(0..free.len().max(1))) {
            taken.insert((s, t));
            batch.negatives.push((s, t));
        }
    }
    batch
}

/// F1 of thresholded decoder probabilities on `pairs`.
pub fn decoder_f1(h: &Matrix, pairs: &EdgeBatch, params: &ModelParams) -> Result<f64> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (i, &(a, b)) in pairs.positives.iter().chain(&pairs.negatives).enumerate() {
        let predicted = decode_edge(h.row(a), h.row(b), &params.decoder)? > 0.5;
        let actual = i < pairs.positives.len();
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    Ok(if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    })
}

/// Loss terms of one step.
pub struct StepLoss {
    pub total: Var,
    pub contrastive: Option<Var>,
    pub reconstruction: Option<Var>,
}

/// Joint loss for one minibatch on a fresh forward pass over `ctx`.
/// `items_*` reference node rows; only anchors in `batch_nodes` should be
/// passed. Either term is dropped when it has no inputs.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_tape(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    ctx: &GraphContext,
    batch_nodes: &[usize],
    items_metapath: &[ContrastItem],
    items_gcn: &[ContrastItem],
    edges: &EdgeBatch,
    hyper: &Hyperparams,
    acts: Activations,
) -> Result<StepLoss> {
    let views = forward(tape, params, ctx, Some(batch_nodes), acts);
    let has_negs = |items: &[ContrastItem]| items.iter().any(|i| !i.negatives.is_empty());
    let contrastive = if has_negs(items_metapath) && has_negs(items_gcn) {
        let lp = contrastive_view_loss_tape(tape, views.metapath, views.gcn, items_metapath, hyper.tau)?;
        let lr = contrastive_view_loss_tape(tape, views.gcn, views.metapath, items_gcn, hyper.tau)?;
        let a = tape.scale(lp, hyper.lambda);
        let b = tape.scale(lr, 1.0 - hyper.lambda);
        Some(tape.add(a, b))
    } else {
        None
    };
    let reconstruction = if edges.positives.is_empty() {
        None
    } else {
        Some(edge_reconstruction_loss_tape(tape, views.metapath, edges, &params.decoder)?)
    };
    let total = match (reconstruction, contrastive) {
        (Some(er), Some(cl)) => {
            let w = tape.scale(cl, hyper.beta);
            tape.add(er, w)
        }
        (Some(er), None) => er,
        (None, Some(cl)) => tape.scale(cl, hyper.beta),
        (None, None) => return Err(Error::Runtime("minibatch has neither contrastive anchors nor edges".into())),
    };
    Ok(StepLoss {
        total,
        contrastive,
        reconstruction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub contrastive: f64,
    pub reconstruction: f64,
    pub val_score: f64,
}

/// Best-on-validation parameter snapshot, stored at single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub hyper: Hyperparams,
    pub epoch: usize,
    pub val_score: f64,
    /// Word position of the training RNG when the snapshot was taken.
    pub rng_word_pos: u128,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochRecord>,
}

/// Runs the full training procedure. `graph` must have been built from the
/// training split only.
pub fn train(lake: &DataLake, graph: &HeteroGraph, split: &Split, hyper: &Hyperparams) -> Result<TrainOutput> {
    hyper.validate()?;
    if hyper.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be at least 1".into()));
    }
    let featurizer = hyper.featurizer()?;
    let contents = extract_all(lake, featurizer.as_ref());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = ModelParams::init(hyper.shape(), &mut rng)?;

    let nodes = TrainingNodes::from_split(graph, split);
    let edges = sample_edge_batches(graph, &nodes, hyper.mask_ratio, &mut rng)?;
    let train_graph = graph.without_edges(&edges.positives)?;
    let train_ctx = GraphContext::new(&train_graph, &contents, hyper.d_c)?;
    let full_ctx = GraphContext::new(graph, &contents, hyper.d_c)?;
    let val = validation_pairs(lake, graph, split, hyper.seed ^ 0x5eed_0f_7a11);
    log::info!(
        "training on {} statements, {} tables, {} masked edges, {} validation pairs",
        nodes.statements.len(),
        nodes.tables.len(),
        edges.positives.len(),
        val.positives.len()
    );

    let anchors = nodes.all();
    let by_type = [nodes.statements.clone(), nodes.tables.clone()];
    let n_batches = anchors.len().div_ceil(hyper.batch_size).max(1);
    let mut adam = Adam::new(hyper.learning_rate, hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps);
    let mut trace = Vec::with_capacity(hyper.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..hyper.epochs {
        let items_p = sample_contrastive_negatives(&by_type, hyper.negatives_per_anchor, &mut rng);
        let items_r = sample_contrastive_negatives(&by_type, hyper.negatives_per_anchor, &mut rng);
        let mut order = anchors.clone();
        order.shuffle(&mut rng);
        let mut pos = edges.positives.clone();
        let mut neg = edges.negatives.clone();
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);

        let (mut sum, mut sum_cl, mut sum_er) = (0.0, 0.0, 0.0);
        for b in 0..n_batches {
            let chunk = |v: &[(usize, usize)]| v[b * v.len() / n_batches..(b + 1) * v.len() / n_batches].to_vec();
            let batch_edges = EdgeBatch {
                positives: chunk(&pos),
                negatives: chunk(&neg),
            };
            let batch_nodes = &order[b * order.len() / n_batches..(b + 1) * order.len() / n_batches];
            let in_batch: HashSet<usize> = batch_nodes.iter().copied().collect();
            let select = |items: &[ContrastItem]| -> Vec<ContrastItem> {
                items.iter().filter(|i| in_batch.contains(&i.anchor)).cloned().collect()
            };
            let mut tape = Tape::new();
            let vars = params.to_tape(&mut tape);
            let step = joint_loss_tape(
                &mut tape,
                &vars,
                &train_ctx,
                batch_nodes,
                &select(&items_p),
                &select(&items_r),
                &batch_edges,
                hyper,
                Activations::default(),
            )?;
            let loss = tape.value(step.total).item();
            if !loss.is_finite() {
                return Err(Error::Runtime(format!("non-finite loss {loss} at epoch {epoch}, batch {b}")));
            }
            sum += loss;
            sum_cl += step.contrastive.map_or(0.0, |v| tape.value(v).item());
            sum_er += step.reconstruction.map_or(0.0, |v| tape.value(v).item());

            let grads = tape.backward(step.total);
            let var_of: BTreeMap<String, Var> = vars.named().into_iter().collect();
            adam.begin_step();
            params = params.map(&mut |name, p| match grads.get(var_of[name]) {
                Some(g) => adam.update(name, p, g),
                None => p.clone(),
            });
        }
        let nb = n_batches as f64;
        let val_score = if val.positives.is_empty() {
            -sum / nb
        } else {
            let (h, _) = infer(&params, &full_ctx);
            decoder_f1(&h, &val, &params)?
        };
        log::debug!("epoch {epoch}: loss {:.5} val {:.4}", sum / nb, val_score);
        trace.push(EpochRecord {
            epoch,
            loss: sum / nb,
            contrastive: sum_cl / nb,
            reconstruction: sum_er / nb,
            val_score,
        });
        if best.as_ref().is_none_or(|c| val_score > c.val_score) {
            best = Some(Checkpoint {
                params: params.to_f32_precision(),
                hyper: hyper.clone(),
                epoch,
                val_score,
                rng_word_pos: rng.get_word_pos(),
            });
        }
    }
    Ok(TrainOutput {
        checkpoint: best.expect("at least one epoch"),
        trace,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LKSCKPT\0";
const EMBEDDING_MAGIC: &[u8; 8] = b"LKSEMBD\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    hyperparams: Hyperparams,
    epoch: usize,
    val_score: f64,
    seed: u64,
    rng_word_pos: String,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.params.named();
        let mut payload = Vec::new();
        for (_, m) in &named {
            storage::push_f32s(&mut payload, m.data());
        }
        let manifest = CheckpointManifest {
            hyperparams: self.hyper.clone(),
            epoch: self.epoch,
            val_score: self.val_score,
            seed: self.hyper.seed,
            rng_word_pos: self.rng_word_pos.to_string(),
            tensors: named
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        storage::encode(CHECKPOINT_MAGIC, FORMAT_VERSION, &manifest, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload): (CheckpointManifest, _) = storage::decode(CHECKPOINT_MAGIC, FORMAT_VERSION, bytes)?;
        let mut cursor = storage::Cursor::new(&payload);
        let mut tensors = BTreeMap::new();
        for t in &manifest.tensors {
            let data = cursor.f32s(t.rows * t.cols)?;
            tensors.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data));
        }
        cursor.finish()?;
        let params = ModelParams::from_named(manifest.hyperparams.shape(), &tensors)?;
        if !manifest.val_score.is_finite() || !params.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite values".into()));
        }
        Ok(Self {
            params,
            hyper: manifest.hyperparams,
            epoch: manifest.epoch,
            val_score: manifest.val_score,
            rng_word_pos: manifest
                .rng_word_pos
                .parse()
                .map_err(|_| Error::Format("bad rng_word_pos".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Frozen, L2-normalized meta-path embeddings of every node, statements
/// first, with the path weights of the inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub n_statements: usize,
    pub vectors: Matrix,
    pub path_weights: Vec<(MetaPath, f64)>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingManifest {
    dim: usize,
    count: usize,
    ordering: String,
    n_statements: usize,
    ids: Vec<String>,
    path_weights: Vec<(MetaPath, f64)>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str, kind: NodeKind) -> Option<usize> {
        let range = match kind {
            NodeKind::Statement => 0..self.n_statements,
            NodeKind::Table => self.n_statements..self.ids.len(),
        };
        range.into_iter().find(|&i| self.ids[i] == id)
    }

    pub fn get(&self, id: &str, kind: NodeKind) -> Option<&[f64]> {
        self.position(id, kind).map(|i| self.vectors.row(i))
    }

    pub fn table_ids(&self) -> &[String] {
        &self.ids[self.n_statements..]
    }

    pub fn table_vectors(&self) -> Matrix {
        let idx: Vec<usize> = (self.n_statements..self.ids.len()).collect();
        self.vectors.gather_rows(&idx)
    }

    pub fn path_weight(&self, path: MetaPath) -> f64 {
        self.path_weights
            .iter()
            .find(|(p, _)| *p == path)
            .map_or(0.0, |(_, w)| *w)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = EmbeddingManifest {
            dim: self.dim(),
            count: self.len(),
            ordering: "statements-then-tables".into(),
            n_statements: self.n_statements,
            ids: self.ids.clone(),
            path_weights: self.path_weights.clone(),
        };
        let mut payload = Vec::new();
        storage::push_f32s(&mut payload, self.vectors.data());
        storage::encode(EMBEDDING_MAGIC, FORMAT_VERSION, &manifest, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, payload): (EmbeddingManifest, _) = storage::decode(EMBEDDING_MAGIC, FORMAT_VERSION, bytes)?;
        if m.ids.len() != m.count || m.n_statements > m.count {
            return Err(Error::Format("embedding manifest counts disagree".into()));
        }
        let mut cursor = storage::Cursor::new(&payload);
        let data = cursor.f32s(m.count * m.dim)?;
        cursor.finish()?;
        Ok(Self {
            ids: m.ids,
            n_statements: m.n_statements,
            vectors: Matrix::from_vec(m.count, m.dim, data),
            path_weights: m.path_weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Meta-path embeddings of every node of `graph` under `checkpoint`,
/// L2-normalized and rounded to stored precision.
pub fn materialize_embeddings(checkpoint: &Checkpoint, graph: &HeteroGraph, lake: &DataLake) -> Result<EmbeddingTable> {
    let featurizer = checkpoint.hyper.featurizer()?;
    let contents = extract_all(lake, featurizer.as_ref());
    let ctx = GraphContext::new(graph, &contents, checkpoint.hyper.d_c)?;
    let (h, path_weights) = infer(&checkpoint.params, &ctx);
    let vectors = h.l2_normalize_rows().map(|x| x as f32 as f64);
    Ok(EmbeddingTable {
        ids: (0..graph.n_nodes()).map(|v| graph.node_id(v).to_string()).collect(),
        n_statements: graph.n_statements(),
        vectors,
        path_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphgen::Edge;

    #[test]
    fn negatives_truncate_and_exclude_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items = sample_contrastive_negatives(&[vec![10, 11, 12, 13, 14]], 16, &mut rng);
        assert_eq!(items.len(), 5);
        for it in &items {
            assert_eq!(it.negatives.len(), 4);
            assert!(!it.negatives.contains(&it.anchor));
            let uniq: BTreeSet<_> = it.negatives.iter().collect();
            assert_eq!(uniq.len(), 4);
        }
        let again = sample_contrastive_negatives(&[vec![10, 11, 12, 13, 14]], 16, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(items, again);
        assert!(sample_contrastive_negatives(&[vec![3]], 4, &mut rng).is_empty());
    }

    #[test]
    fn negative_selection_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let nodes: Vec<usize> = (0..6).collect();
        let mut counts = [0usize; 6];
        let draws = 10_000;
        for _ in 0..draws {
            let items = sample_contrastive_negatives(std::slice::from_ref(&nodes), 2, &mut rng);
            for n in &items[0].negatives {
                counts[*n] += 1;
            }
        }
        // anchor 0 never selected; the other five share 2 picks per draw
        assert_eq!(counts[0], 0);
        let expected = draws as f64 * 2.0 / 5.0;
        for &c in &counts[1..] {
            assert!((c as f64 - expected).abs() / expected < 0.05, "{counts:?}");
        }
    }

    fn toy_graph(full: bool) -> HeteroGraph {
        // 2 statements, 2 tables
        let mut st = vec![Edge { src: 0, dst: 0, weight: 1.0 }];
        if full {
            st.extend([
                Edge { src: 0, dst: 1, weight: 1.0 },
                Edge { src: 1, dst: 0, weight: 1.0 },
                Edge { src: 1, dst: 1, weight: 1.0 },
            ]);
        }
        HeteroGraph::from_parts(
            vec!["s0".into(), "s1".into()],
            vec!["t0".into(), "t1".into()],
            st,
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn edge_batches_are_matched_and_unconnected() {
        let g = toy_graph(false);
        let nodes = TrainingNodes {
            statements: vec![0, 1],
            tables: vec![2, 3],
        };
        let b = sample_edge_batches(&g, &nodes, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(b.positives, vec![(0, 2)]);
        assert_eq!(b.negatives.len(), 1);
        let (x, y) = b.negatives[0];
        assert!(x < 2 && y >= 2 && !g.has_edge(x, y));
    }

    #[test]
    fn edge_negatives_exhausted() {
        let g = toy_graph(true);
        let nodes = TrainingNodes {
            statements: vec![0, 1],
            tables: vec![2, 3],
        };
        let err = sample_edge_batches(&g, &nodes, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap_err();
        assert!(err.to_string().contains("exhausted"), "{err}");
    }

    #[test]
    fn high_mask_ratio_masks_nearly_everything() {
        let st: Vec<Edge> = (0..100).map(|i| Edge { src: i, dst: 0, weight: 1.0 }).collect();
        let g = HeteroGraph::from_parts(
            (0..100).map(|i| format!("s{i}")).collect(),
            vec!["t0".into(), "t1".into()],
            st,
            vec![],
            vec![],
        )
        .unwrap();
        let nodes = TrainingNodes {
            statements: (0..100).collect(),
            tables: vec![100, 101],
        };
        let b = sample_edge_batches(&g, &nodes, 0.999, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(b.positives.len() >= 95);
    }

    #[test]
    fn adam_matches_reference_on_quadratic() {
        // f(x) = x^2, g = 2x
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let mut x = Matrix::scalar(1.0);
        let (mut m, mut v, mut xr) = (0.0, 0.0, 1.0f64);
        for t in 1..=5 {
            adam.begin_step();
            let g = Matrix::scalar(2.0 * x.item());
            x = adam.update("x", &x, &g);
            let gr = 2.0 * xr;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            xr -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((x.item() - xr).abs() < 1e-15);
        }
        // first step moves by exactly lr
        let mut a = Adam::new(0.1, 0.9, 0.999, 1e-8);
        a.begin_step();
        let y = a.update("y", &Matrix::scalar(3.0), &Matrix::scalar(6.0));
        assert!((y.item() - 2.9).abs() < 1e-7);
    }

    #[test]
    fn hyperparams_defaults_and_json() {
        let h = Hyperparams::default();
        h.validate().unwrap();
        assert_eq!((h.d, h.k, h.gcn_depth, h.epochs), (128, 10, 3, 50));
        assert_eq!((h.tau, h.lambda, h.beta, h.learning_rate), (0.07, 0.5, 0.5, 8e-4));
        let parsed: Hyperparams = serde_json::from_str(r#"{"k": 5}"#).unwrap();
        assert_eq!(parsed.k, 5);
        assert_eq!(parsed.d, 128);
        assert!(serde_json::from_str::<Hyperparams>(r#"{"nope": 1}"#).is_err());
        let bad = Hyperparams {
            mask_ratio: 1.0,
            ..Hyperparams::default()
        };
        assert!(bad.validate().is_err());
    }
}
