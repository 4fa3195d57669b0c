//! Query embedding and the two retrieval modes: ranked top-k by cosine and
//! two-stage binary retrieval with a relevance classifier.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annindex::AnnIndex;
use crate::autodiff::{Activation, Tape};
use crate::corpus::{read_table_csv, DataLake, NlStatement, Table};
use crate::encoder::{encode, extract_statement_content, extract_table_content, TextFeaturizer};
use crate::error::{Error, Result};
use crate::graphgen::{bm25_score, CorpusStats, MeanContentScorer, MetaPath};
use crate::harness::metrics::prf;
use crate::model::ModelParams;
use crate::objectives::{decode_tape, MlpParams, PROB_EPS};
use crate::storage;
use crate::tensor::{cosine, normalized, Matrix};
use crate::text::tokenize;
use crate::trainer::{Adam, Checkpoint, Hyperparams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Nl,
    Table,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Query {
    Nl(NlStatement),
    Table(Table),
}

impl Query {
    pub fn id(&self) -> &str {
        match self {
            Query::Nl(s) => &s.id,
            Query::Table(t) => &t.id,
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            Query::Nl(_) => Modality::Nl,
            Query::Table(_) => Modality::Table,
        }
    }

    /// A `.csv` file is one table query (header row expected, id = file
    /// stem); anything else is read as JSON lines of `{"id", "text"}`.
    pub fn load_file(path: &Path) -> Result<Vec<Query>> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::InvalidArgument(format!("bad query file name {}", path.display())))?;
            return Ok(vec![Query::Table(read_table_csv(path, id, true, None)?)]);
        }
        let text = std::fs::read_to_string(path)?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: NlStatement = serde_json::from_str(line).map_err(|e| Error::Ingest {
                file: path.to_path_buf(),
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
            out.push(Query::Nl(s));
        }
        if out.is_empty() {
            return Err(Error::Validation(format!("{} holds no queries", path.display())));
        }
        Ok(out)
    }
}

/// Embedding of one query together with the transient neighbors it was
/// attached to (ids and edge weights), which are reported but never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
    pub path: MetaPath,
    pub attached: Vec<(String, f64)>,
}

/// Frozen state for embedding queries against one trained model.
pub struct QueryEmbedder {
    params: ModelParams,
    featurizer: Box<dyn TextFeaturizer>,
    path_weights: Vec<(MetaPath, f64)>,
    k: usize,
    k1: f64,
    b: f64,
    statement_ids: Vec<String>,
    statement_docs: Vec<Vec<String>>,
    stats: Option<CorpusStats>,
    table_ids: Vec<String>,
    table_features: Vec<Vec<f64>>,
}

impl QueryEmbedder {
    /// `path_weights` are the inference-pass weights stored with the
    /// materialized embeddings.
    pub fn new(checkpoint: &Checkpoint, lake: &DataLake, path_weights: &[(MetaPath, f64)]) -> Result<Self> {
        let featurizer = checkpoint.hyper.featurizer()?;
        let statement_docs: Vec<Vec<String>> = lake.statements.iter().map(|s| tokenize(&s.text)).collect();
        let stats = (!statement_docs.is_empty()).then(|| CorpusStats::from_docs(&statement_docs));
        let table_features = {
            let scorer = MeanContentScorer::new(featurizer.as_ref());
            lake.tables.iter().map(|t| scorer.mean_feature(t)).collect()
        };
        Ok(Self {
            params: checkpoint.params.clone(),
            path_weights: path_weights.to_vec(),
            k: checkpoint.hyper.k,
            k1: crate::graphgen::DEFAULT_K1,
            b: crate::graphgen::DEFAULT_B,
            statement_ids: lake.statements.iter().map(|s| s.id.clone()).collect(),
            statement_docs,
            stats,
            table_ids: lake.tables.iter().map(|t| t.id.clone()).collect(),
            table_features,
            featurizer,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.encoder.output_dim()
    }

    /// Content embedding, then one meta-path pass for the query node. The
    /// similarity edges a query gets (statement-statement or table-table)
    /// are not part of either meta-path, so the query's only meta-path
    /// neighbor is itself.
    pub fn embed(&self, query: &Query) -> Result<QueryEmbedding> {
        let (content, path, attached) = match query {
            Query::Nl(s) => {
                let tokens = tokenize(&s.text);
                if tokens.is_empty() {
                    return Err(Error::Validation(format!("query {} has no text", s.id)));
                }
                let attached = match &self.stats {
                    Some(stats) => {
                        let scores = self
                            .statement_docs
                            .iter()
                            .map(|d| bm25_score(&tokens, d, stats, self.k1, self.b))
                            .collect::<Result<Vec<_>>>()?;
                        top_k(&self.statement_ids, &scores, self.k)
                    }
                    None => Vec::new(),
                };
                (extract_statement_content(s, self.featurizer.as_ref()), MetaPath::Sts, attached)
            }
            Query::Table(t) => {
                if tokenize(&t.full_text()).is_empty() {
                    return Err(Error::Validation(format!("table query {} has no text", t.id)));
                }
                let feature = MeanContentScorer::new(self.featurizer.as_ref()).mean_feature(t);
                let scores: Vec<f64> = self.table_features.iter().map(|f| cosine(&feature, f)).collect();
                let attached = top_k(&self.table_ids, &scores, self.k);
                (extract_table_content(t, self.featurizer.as_ref()), MetaPath::Tst, attached)
            }
        };
        let h = encode(&content, &self.params.encoder)?;
        let beta = self
            .path_weights
            .iter()
            .find(|(p, _)| *p == path)
            .map_or(1.0, |(_, w)| *w);
        // node level over the self-reference alone has weight 1
        let v: Vec<f64> = h
            .iter()
            .map(|&x| Activation::Elu.apply(beta * Activation::Elu.apply(x)))
            .collect();
        Ok(QueryEmbedding {
            vector: normalized(&v),
            path,
            attached,
        })
    }
}

fn top_k(ids: &[String], scores: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut c: Vec<(usize, f64)> = scores.iter().copied().enumerate().filter(|&(_, s)| s > 0.0).collect();
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    c.truncate(k);
    let max = c.first().map_or(1.0, |x| x.1);
    c.into_iter().map(|(i, s)| (ids[i].clone(), s / max)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ranked,
    Binary,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranked" => Ok(Mode::Ranked),
            "binary" => Ok(Mode::Binary),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTable {
    pub table_id: String,
    pub score: f64,
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: String,
    pub mode: Mode,
    pub results: Vec<ScoredTable>,
}

/// Top `k` tables by cosine, scores non-increasing.
pub fn rank_tables(h_q: &[f64], index: &AnnIndex, k: usize, search_breadth: usize) -> Result<Vec<ScoredTable>> {
    Ok(index
        .query(h_q, k, search_breadth)?
        .into_iter()
        .map(|(table_id, score)| ScoredTable { table_id, score })
        .collect())
}

/// Anything that scores a (query, table) embedding pair in (0,1).
pub trait RelevanceModel {
    fn probability(&self, query: &[f64], table: &[f64]) -> f64;
}

impl<F: Fn(&[f64], &[f64]) -> f64> RelevanceModel for F {
    fn probability(&self, query: &[f64], table: &[f64]) -> f64 {
        self(query, table)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryResult {
    pub candidates: Vec<String>,
    /// candidates with probability above 0.5, in candidate order
    pub selected: Vec<ScoredTable>,
}

/// Number of candidates taken from `n_tables` at `fraction`.
pub fn candidate_count(fraction: f64, n_tables: usize) -> usize {
    ((fraction * n_tables as f64).ceil() as usize).clamp(1, n_tables.max(1))
}

/// Candidate retrieval by cosine, then per-pair classification.
pub fn binary_retrieve(
    h_q: &[f64],
    index: &AnnIndex,
    classifier: &dyn RelevanceModel,
    candidate_fraction: f64,
    search_breadth_factor: usize,
) -> Result<BinaryResult> {
    if !(candidate_fraction > 0.0 && candidate_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "candidate fraction {candidate_fraction} outside (0,1]"
        )));
    }
    let n = candidate_count(candidate_fraction, index.len());
    let hits = index.search(h_q, n, n.saturating_mul(search_breadth_factor.max(1)))?;
    let mut selected = Vec::new();
    let mut candidates = Vec::with_capacity(hits.len());
    for (pos, _) in hits {
        let id = &index.ids()[pos];
        candidates.push(id.clone());
        let p = classifier.probability(h_q, index.vector(pos));
        if p > 0.5 {
            selected.push(ScoredTable {
                table_id: id.clone(),
                score: p,
            });
        }
    }
    Ok(BinaryResult { candidates, selected })
}

/// MLP over `h_q ∘ h_t` with a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceClassifier {
    pub params: MlpParams,
}

impl RelevanceModel for RelevanceClassifier {
    fn probability(&self, query: &[f64], table: &[f64]) -> f64 {
        let prod: Vec<f64> = query.iter().zip(table).map(|(a, b)| a * b).collect();
        self.params.forward(&Matrix::row_vector(&prod))[0]
    }
}

const CLASSIFIER_MAGIC: &[u8; 8] = b"LKSCLSF\0";
const CLASSIFIER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ClassifierManifest {
    dim: usize,
    report: ClassifierReport,
}

impl RelevanceClassifier {
    pub fn to_bytes(&self, report: &ClassifierReport) -> Result<Vec<u8>> {
        let p = &self.params;
        let mut payload = Vec::new();
        for m in [&p.w1, &p.b1, &p.w2, &p.b2] {
            storage::push_f32s(&mut payload, m.data());
        }
        let manifest = ClassifierManifest {
            dim: p.dim(),
            report: report.clone(),
        };
        storage::encode(CLASSIFIER_MAGIC, CLASSIFIER_VERSION, &manifest, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, ClassifierReport)> {
        let (m, payload): (ClassifierManifest, _) = storage::decode(CLASSIFIER_MAGIC, CLASSIFIER_VERSION, bytes)?;
        let d = m.dim;
        let mut c = storage::Cursor::new(&payload);
        let params = MlpParams {
            w1: Matrix::from_vec(d, d, c.f32s(d * d)?),
            b1: Matrix::from_vec(1, d, c.f32s(d)?),
            w2: Matrix::from_vec(d, 1, c.f32s(d)?),
            b2: Matrix::from_vec(1, 1, c.f32s(1)?),
        };
        c.finish()?;
        Ok((Self { params }, m.report))
    }

    pub fn save(&self, report: &ClassifierReport, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes(report)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ClassifierReport)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A query embedding with its relevant table ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledQuery {
    pub id: String,
    pub vector: Vec<f64>,
    pub relevant: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub negative_ratio: usize,
    pub seed: u64,
}

impl ClassifierOptions {
    pub fn from_hyper(h: &Hyperparams) -> Self {
        Self {
            epochs: h.classifier_epochs,
            learning_rate: h.classifier_learning_rate,
            negative_ratio: h.classifier_negative_ratio,
            seed: h.seed ^ 0xc1a5_51f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    /// loss of the last epoch
    pub final_loss: f64,
    /// epoch kept: best validation F1 (earliest on ties), or the last
    /// epoch without validation queries
    pub best_epoch: usize,
    /// micro F1 over every (training query, table) pair
    pub train_f1: f64,
    /// micro F1 over every (validation query, table) pair; None without
    /// validation queries
    pub val_f1: Option<f64>,
}

/// Micro F1 of thresholded predictions over the full query x table grid.
pub fn grid_f1(model: &dyn RelevanceModel, queries: &[LabeledQuery], table_ids: &[String], tables: &Matrix) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for q in queries {
        for (j, id) in table_ids.iter().enumerate() {
            let predicted = model.probability(&q.vector, tables.row(j)) > 0.5;
            match (predicted, q.relevant.contains(id)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    prf(tp, fp, fn_).2
}

/// Full-batch Adam on group-mean BCE. Every epoch draws `negative_ratio`
/// non-relevant tables per positive pair. With validation queries the
/// epoch with the best validation F1 is kept.
pub fn train_relevance_classifier(
    train: &[LabeledQuery],
    validation: &[LabeledQuery],
    table_ids: &[String],
    tables: &Matrix,
    opts: ClassifierOptions,
) -> Result<(RelevanceClassifier, ClassifierReport)> {
    if table_ids.len() != tables.rows() {
        return Err(Error::DimensionMismatch {
            expected: table_ids.len(),
            actual: tables.rows(),
        });
    }
    let d = tables.cols();
    if let Some(q) = train.iter().chain(validation).find(|q| q.vector.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: q.vector.len(),
        });
    }
    let positives: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| {
            table_ids
                .iter()
                .enumerate()
                .filter(|(_, id)| q.relevant.contains(*id))
                .map(move |(j, _)| (qi, j))
        })
        .collect();
    if positives.is_empty() {
        return Err(Error::Validation("relevance classifier needs at least one positive label".into()));
    }
    if opts.epochs == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("classifier epochs and learning rate must be positive".into()));
    }
    let non_relevant: Vec<Vec<usize>> = train
        .iter()
        .map(|q| (0..table_ids.len()).filter(|&j| !q.relevant.contains(&table_ids[j])).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = MlpParams::init(d, &mut rng);
    let mut adam = Adam::new(opts.learning_rate, 0.9, 0.999, 1e-8);
    let mut final_loss = f64::NAN;
    let stored = |p: &MlpParams| RelevanceClassifier {
        params: p.map("classifier", &mut |_, m| m.map(|x| x as f32 as f64)),
    };
    // (epoch, validation F1, model) of the best epoch so far
    let mut best: Option<(usize, f64, RelevanceClassifier)> = None;
    for epoch in 1..=opts.epochs {
        let mut pairs = positives.clone();
        for &(qi, _) in &positives {
            let pool = &non_relevant[qi];
            let m = opts.negative_ratio.min(pool.len());
            pairs.extend(index::sample(&mut rng, pool.len(), m).into_iter().map(|i| (qi, pool[i])));
        }
        let left: Vec<Vec<f64>> = pairs.iter().map(|&(qi, _)| train[qi].vector.clone()).collect();
        let right: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
        let mut tape = Tape::new();
        let l = tape.leaf(Matrix::from_rows(&left));
        let r = tape.leaf(tables.gather_rows(&right));
        let vars = params.map("classifier", &mut |_, m| tape.leaf(m.clone()));
        let probs = decode_tape(&mut tape, l, r, &vars);
        let loss = tape.bce_means(probs, positives.len(), PROB_EPS);
        final_loss = tape.value(loss).item();
        if !final_loss.is_finite() {
            return Err(Error::Runtime("classifier loss is not finite".into()));
        }
        let grads = tape.backward(loss);
        adam.begin_step();
        let mut named = std::collections::BTreeMap::new();
        vars.map("classifier", &mut |n, v| named.insert(n.to_string(), *v));
        params = params.map("classifier", &mut |name, p| match grads.get(named[name]) {
            Some(g) => adam.update(name, p, g),
            None => p.clone(),
        });
        if !validation.is_empty() {
            let model = stored(&params);
            let f = grid_f1(&model, validation, table_ids, tables);
            if best.as_ref().is_none_or(|b| f > b.1) {
                best = Some((epoch, f, model));
            }
        }
    }
    let (best_epoch, model) = match best {
        Some((e, _, m)) => (e, m),
        None => (opts.epochs, stored(&params)),
    };
    let report = ClassifierReport {
        final_loss,
        best_epoch,
        train_f1: grid_f1(&model, train, table_ids, tables),
        val_f1: (!validation.is_empty()).then(|| grid_f1(&model, validation, table_ids, tables)),
    };
    Ok((model, report))
}

/// Per-stage call counts, so tests can check that both query modalities
/// reach the same retrieval code.
#[derive(Debug, Default)]
pub struct CodePathCounters {
    pub embed_nl: AtomicUsize,
    pub embed_table: AtomicUsize,
    pub ranked: AtomicUsize,
    pub binary: AtomicUsize,
}

impl CodePathCounters {
    pub fn snapshot(&self) -> [usize; 4] {
        [&self.embed_nl, &self.embed_table, &self.ranked, &self.binary].map(|c| c.load(Ordering::Relaxed))
    }
}

/// Embedder, index and optional classifier bundled for serving queries.
pub struct RetrievalEngine {
    pub embedder: QueryEmbedder,
    pub index: AnnIndex,
    pub classifier: Option<RelevanceClassifier>,
    pub candidate_fraction: f64,
    pub search_breadth_factor: usize,
    pub counters: CodePathCounters,
}

impl RetrievalEngine {
    pub fn new(embedder: QueryEmbedder, index: AnnIndex, classifier: Option<RelevanceClassifier>, hyper: &Hyperparams) -> Self {
        Self {
            embedder,
            index,
            classifier,
            candidate_fraction: hyper.candidate_fraction,
            search_breadth_factor: hyper.search_breadth_factor,
            counters: CodePathCounters::default(),
        }
    }

    pub fn embed(&self, query: &Query) -> Result<QueryEmbedding> {
        let counter = match query.modality() {
            Modality::Nl => &self.counters.embed_nl,
            Modality::Table => &self.counters.embed_table,
        };
        counter.fetch_add(1, Ordering::Relaxed);
        self.embedder.embed(query)
    }

    pub fn retrieve(&self, query: &Query, mode: Mode, k: usize) -> Result<ResultRecord> {
        let h = self.embed(query)?.vector;
        self.retrieve_embedded(query.id(), &h, mode, k)
    }

    /// Retrieval from an already computed query embedding.
    pub fn retrieve_embedded(&self, query_id: &str, h: &[f64], mode: Mode, k: usize) -> Result<ResultRecord> {
        let results = match mode {
            Mode::Ranked => {
                self.counters.ranked.fetch_add(1, Ordering::Relaxed);
                rank_tables(h, &self.index, k, k.saturating_mul(self.search_breadth_factor))?
            }
            Mode::Binary => {
                self.counters.binary.fetch_add(1, Ordering::Relaxed);
                let clf = self
                    .classifier
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("binary mode needs a trained classifier".into()))?;
                binary_retrieve(h, &self.index, clf, self.candidate_fraction, self.search_breadth_factor)?.selected
            }
        };
        Ok(ResultRecord {
            query_id: query_id.to_string(),
            mode,
            results,
        })
    }
}

/// Writes records as JSON lines.
pub fn write_results_jsonl(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_results_jsonl(path: &Path) -> Result<Vec<ResultRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
