//! Heterogeneous statement/table graph: BM25 statement links, top-K table
//! links, training-split statement-table links, the normalized unified
//! adjacency and meta-path neighborhoods.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{DataLake, NlStatement, Split, Table};
use crate::encoder::{extract_table_content, TextFeaturizer};
use crate::error::{Error, Result};
use crate::tensor::{cosine, SparseMatrix};
use crate::text::tokenize;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Collection statistics for BM25.
#[derive(Clone, Debug)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub doc_freq: HashMap<String, usize>,
    pub avg_doc_len: f64,
}

impl CorpusStats {
    pub fn from_docs(docs: &[Vec<String>]) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for d in docs {
            let unique: BTreeSet<&String> = d.iter().collect();
            for t in unique {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
        }
        let total: usize = docs.iter().map(Vec::len).sum();
        Self {
            n_docs: docs.len(),
            doc_freq,
            avg_doc_len: if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 },
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        let n = self.n_docs as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Okapi BM25 of `doc_tokens` for `query_tokens`. An empty document scores 0.
pub fn bm25_score(query_tokens: &[String], doc_tokens: &[String], stats: &CorpusStats, k1: f64, b: f64) -> Result<f64> {
    if stats.n_docs == 0 || stats.avg_doc_len <= 0.0 {
        return Err(Error::InvalidArgument("BM25 needs a nonempty corpus".into()));
    }
    if doc_tokens.is_empty() {
        return Ok(0.0);
    }
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in doc_tokens {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    let norm = k1 * (1.0 - b + b * doc_tokens.len() as f64 / stats.avg_doc_len);
    Ok(query_tokens
        .iter()
        .filter_map(|q| tf.get(q.as_str()).map(|&f| (q, f as f64)))
        .map(|(q, f)| stats.idf(q) * f * (k1 + 1.0) / (f + norm))
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Six-decimal fixed point, as written by the graph file format.
fn quantize_weight(w: f64) -> f64 {
    ((w * 1e6).round() / 1e6).max(1e-6)
}

/// Top-K positive-score peers per row, symmetrized by union. `scores[i][j]`
/// is the score of `j` as a neighbor of `i` (indices are local). Weights are
/// scores divided by the row maximum (the score floor is 0), so they lie in
/// (0,1]; a pair selected from both ends keeps the larger weight.
fn top_k_edges(scores: &[Vec<f64>], k: usize) -> Vec<(usize, usize, f64)> {
    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, row) in scores.iter().enumerate() {
        let mut cands: Vec<(usize, f64)> = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| j != i && s > 0.0)
            .map(|(j, &s)| (j, s))
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(k);
        let Some(max) = cands.first().map(|c| c.1) else { continue };
        for (j, s) in cands {
            let w = quantize_weight(s / max);
            let key = (i.min(j), i.max(j));
            let slot = pairs.entry(key).or_insert(0.0);
            *slot = slot.max(w);
        }
    }
    pairs.into_iter().map(|((a, b), w)| (a, b, w)).collect()
}

/// Statement-statement edges over statement indices `0..|S|`.
pub fn build_nl_nl_edges(statements: &[NlStatement], k: usize, k1: f64, b: f64) -> Result<Vec<Edge>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if statements.len() < 2 {
        return Ok(Vec::new());
    }
    let docs: Vec<Vec<String>> = statements.iter().map(|s| tokenize(&s.text)).collect();
    let stats = CorpusStats::from_docs(&docs);
    let scores = docs
        .iter()
        .map(|q| docs.iter().map(|d| bm25_score(q, d, &stats, k1, b)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k_edges(&scores, k)
        .into_iter()
        .map(|(src, dst, weight)| Edge { src, dst, weight })
        .collect())
}

/// Pairwise table relevance used when no table-table labels exist.
pub trait TableSimilarityScorer {
    fn score(&self, a: &Table, b: &Table) -> Result<f64>;

    /// Full score matrix; the default calls [`score`](Self::score) per pair.
    fn score_matrix(&self, tables: &[Table]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![vec![0.0; tables.len()]; tables.len()];
        for (i, a) in tables.iter().enumerate() {
            for (j, b) in tables.iter().enumerate() {
                if i == j {
                    continue;
                }
                let s = self.score(a, b)?;
                if !s.is_finite() {
                    return Err(Error::Runtime(format!(
                        "table scorer returned {s} for pair ({}, {})",
                        a.id, b.id
                    )));
                }
                out[i][j] = s;
            }
        }
        Ok(out)
    }
}

/// Cosine similarity of mean-pooled content features.
pub struct MeanContentScorer<'a> {
    featurizer: &'a dyn TextFeaturizer,
}

impl<'a> MeanContentScorer<'a> {
    pub fn new(featurizer: &'a dyn TextFeaturizer) -> Self {
        Self { featurizer }
    }

    pub fn mean_feature(&self, t: &Table) -> Vec<f64> {
        let cs = extract_table_content(t, self.featurizer);
        let mut mean = vec![0.0; self.featurizer.dim()];
        for e in &cs.elements {
            for (m, x) in mean.iter_mut().zip(e) {
                *m += x;
            }
        }
        let n = cs.elements.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

impl TableSimilarityScorer for MeanContentScorer<'_> {
    fn score(&self, a: &Table, b: &Table) -> Result<f64> {
        Ok(cosine(&self.mean_feature(a), &self.mean_feature(b)))
    }

    fn score_matrix(&self, tables: &[Table]) -> Result<Vec<Vec<f64>>> {
        let feats: Vec<Vec<f64>> = tables.iter().map(|t| self.mean_feature(t)).collect();
        Ok((0..tables.len())
            .map(|i| {
                (0..tables.len())
                    .map(|j| if i == j { 0.0 } else { cosine(&feats[i], &feats[j]) })
                    .collect()
            })
            .collect())
    }
}

/// Precomputed scores read from a `table_id<TAB>table_id<TAB>score` file;
/// unlisted pairs score 0.
pub struct FileScorer {
    scores: HashMap<(String, String), f64>,
}

impl FileScorer {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut scores = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let parsed = match parts.as_slice() {
                [a, b, s] => s.parse::<f64>().ok().map(|s| (a.to_string(), b.to_string(), s)),
                _ => None,
            };
            let Some((a, b, s)) = parsed else {
                return Err(Error::Ingest {
                    file: path.to_path_buf(),
                    line: i as u64 + 1,
                    message: "expected table_id, table_id, score".into(),
                });
            };
            scores.insert((b.clone(), a.clone()), s);
            scores.insert((a, b), s);
        }
        Ok(Self { scores })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String, f64)>) -> Self {
        let mut scores = HashMap::new();
        for (a, b, s) in pairs {
            scores.insert((b.clone(), a.clone()), s);
            scores.insert((a, b), s);
        }
        Self { scores }
    }
}

impl TableSimilarityScorer for FileScorer {
    fn score(&self, a: &Table, b: &Table) -> Result<f64> {
        Ok(self.scores.get(&(a.id.clone(), b.id.clone())).copied().unwrap_or(0.0))
    }
}

/// Table-table edges over table-local indices `0..|T|`. Ground-truth labels
/// are used verbatim (weight 1) when present; `allowed` then restricts them
/// to pairs whose endpoints are both listed.
pub fn build_table_table_edges(
    lake: &DataLake,
    scorer: &dyn TableSimilarityScorer,
    k: usize,
    allowed: Option<&BTreeSet<String>>,
) -> Result<Vec<Edge>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let index: HashMap<&str, usize> = lake.tables.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    if let Some(labels) = &lake.table_table_labels {
        let keep = |id: &String| allowed.is_none_or(|a| a.contains(id));
        return Ok(labels
            .iter()
            .filter(|(a, b)| a < b && keep(a) && keep(b))
            .map(|(a, b)| {
                let (x, y) = (index[a.as_str()], index[b.as_str()]);
                Edge {
                    src: x.min(y),
                    dst: x.max(y),
                    weight: 1.0,
                }
            })
            .collect());
    }
    let scores = scorer.score_matrix(&lake.tables)?;
    Ok(top_k_edges(&scores, k)
        .into_iter()
        .map(|(src, dst, weight)| Edge { src, dst, weight })
        .collect())
}

/// Statement-table edges (statement index, table-local index) for labels
/// whose statement is in the training split.
pub fn build_nl_table_edges(lake: &DataLake, train_statement_ids: &BTreeSet<String>) -> Vec<Edge> {
    let s_index: HashMap<&str, usize> = lake
        .statements
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let t_index: HashMap<&str, usize> = lake.tables.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    lake.nl_table_labels
        .iter()
        .filter(|(s, _)| train_statement_ids.contains(s))
        .map(|(s, t)| Edge {
            src: s_index[s.as_str()],
            dst: t_index[t.as_str()],
            weight: 1.0,
        })
        .collect()
}

/// `D^-1/2 (A + I) D^-1/2` over the unified index layout: statements at
/// `0..|S|`, tables at `|S|..|S|+|T|`. `edges_st` carries table-local `dst`;
/// `edges_tt` carries table-local endpoints.
pub fn normalize_adjacency(
    edges_st: &[Edge],
    edges_ss: &[Edge],
    edges_tt: &[Edge],
    n_statements: usize,
    n_tables: usize,
) -> Result<SparseMatrix> {
    let n = n_statements + n_tables;
    let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
    let mut push = |a: usize, b: usize, w: f64| -> Result<()> {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::InvalidArgument(format!("edge ({a}, {b}) has invalid weight {w}")));
        }
        if a >= n || b >= n {
            return Err(Error::InvalidArgument(format!("edge ({a}, {b}) out of range")));
        }
        triplets.push((a, b, w));
        triplets.push((b, a, w));
        Ok(())
    };
    for e in edges_st {
        push(e.src, e.dst + n_statements, e.weight)?;
    }
    for e in edges_ss {
        push(e.src, e.dst, e.weight)?;
    }
    for e in edges_tt {
        push(e.src + n_statements, e.dst + n_statements, e.weight)?;
    }
    let raw = SparseMatrix::from_triplets(n, n, triplets);
    let degree: Vec<f64> = (0..n).map(|i| raw.row_entries(i).map(|(_, v)| v).sum()).collect();
    let mut scaled = Vec::with_capacity(raw.nnz());
    for i in 0..n {
        for (j, v) in raw.row_entries(i) {
            scaled.push((i, j, v / (degree[i] * degree[j]).sqrt()));
        }
    }
    Ok(SparseMatrix::from_triplets(n, n, scaled))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetaPath {
    /// statement - table - statement
    Sts,
    /// table - statement - table
    Tst,
}

impl MetaPath {
    pub const ALL: [MetaPath; 2] = [MetaPath::Sts, MetaPath::Tst];

    pub fn symmetric(self) -> bool {
        true
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaPath::Sts => "S-T-S",
            MetaPath::Tst => "T-S-T",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    Statement,
    Table,
}

/// One neighbor occurrence; `instance` is the (target, middle, end) node
/// triple of the path instance, `None` for the self-reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Occurrence {
    pub node: usize,
    pub instance: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaPathNeighborhood {
    pub target: usize,
    pub path: MetaPath,
    pub occurrences: Vec<Occurrence>,
}

impl MetaPathNeighborhood {
    pub fn nodes(&self) -> Vec<usize> {
        self.occurrences.iter().map(|o| o.node).collect()
    }
}

/// The embedding graph. Node indices: statements `0..|S|`, tables
/// `|S|..|S|+|T|`. `edges_st` is stored with unified indices on both ends,
/// `edges_ss` and `edges_tt` once per unordered pair with `src < dst`.
#[derive(Clone, Debug)]
pub struct HeteroGraph {
    pub statement_ids: Vec<String>,
    pub table_ids: Vec<String>,
    pub edges_st: Vec<Edge>,
    pub edges_ss: Vec<Edge>,
    pub edges_tt: Vec<Edge>,
    pub normalized_adjacency: Arc<SparseMatrix>,
    st_adjacency: Vec<Vec<(usize, f64)>>,
}

impl PartialEq for HeteroGraph {
    fn eq(&self, other: &Self) -> bool {
        self.statement_ids == other.statement_ids
            && self.table_ids == other.table_ids
            && self.edges_st == other.edges_st
            && self.edges_ss == other.edges_ss
            && self.edges_tt == other.edges_tt
    }
}

/// Graph construction parameters.
#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    pub k: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            k: 10,
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

impl HeteroGraph {
    /// Assembles a graph from edge lists (unified indices for `edges_st`,
    /// type-local indices for `edges_ss`/`edges_tt`... see [`normalize_adjacency`]).
    pub fn from_parts(
        statement_ids: Vec<String>,
        table_ids: Vec<String>,
        edges_st_local: Vec<Edge>,
        edges_ss: Vec<Edge>,
        edges_tt_local: Vec<Edge>,
    ) -> Result<Self> {
        let ns = statement_ids.len();
        let nt = table_ids.len();
        let canon = |mut edges: Vec<Edge>, bound: usize| -> Result<Vec<Edge>> {
            for e in &mut edges {
                if e.src == e.dst {
                    return Err(Error::Validation(format!("self-edge on node {}", e.src)));
                }
                if e.src >= bound || e.dst >= bound {
                    return Err(Error::Validation(format!("edge ({}, {}) out of range", e.src, e.dst)));
                }
                if e.src > e.dst {
                    std::mem::swap(&mut e.src, &mut e.dst);
                }
            }
            edges.sort_by(|a, b| (a.src, a.dst).cmp(&(b.src, b.dst)));
            edges.dedup_by(|a, b| a.src == b.src && a.dst == b.dst);
            Ok(edges)
        };
        let edges_ss = canon(edges_ss, ns)?;
        let edges_tt_local = canon(edges_tt_local, nt)?;
        let mut edges_st_local = edges_st_local;
        for e in &edges_st_local {
            if e.src >= ns || e.dst >= nt {
                return Err(Error::Validation(format!("statement-table edge ({}, {}) out of range", e.src, e.dst)));
            }
        }
        edges_st_local.sort_by(|a, b| (a.src, a.dst).cmp(&(b.src, b.dst)));
        edges_st_local.dedup_by(|a, b| a.src == b.src && a.dst == b.dst);
        let adjacency = normalize_adjacency(&edges_st_local, &edges_ss, &edges_tt_local, ns, nt)?;
        let shift = |edges: Vec<Edge>, s_off: usize, d_off: usize| -> Vec<Edge> {
            edges
                .into_iter()
                .map(|e| Edge {
                    src: e.src + s_off,
                    dst: e.dst + d_off,
                    weight: e.weight,
                })
                .collect()
        };
        let edges_st = shift(edges_st_local, 0, ns);
        let edges_tt = shift(edges_tt_local, ns, ns);
        let mut st_adjacency = vec![Vec::new(); ns + nt];
        for e in &edges_st {
            st_adjacency[e.src].push((e.dst, e.weight));
            st_adjacency[e.dst].push((e.src, e.weight));
        }
        Ok(Self {
            statement_ids,
            table_ids,
            edges_st,
            edges_ss,
            edges_tt,
            normalized_adjacency: Arc::new(adjacency),
            st_adjacency,
        })
    }

    /// Builds the graph for `lake` from the training split only.
    pub fn build(
        lake: &DataLake,
        split: &Split,
        scorer: &dyn TableSimilarityScorer,
        options: GraphOptions,
    ) -> Result<Self> {
        let ss = build_nl_nl_edges(&lake.statements, options.k, options.k1, options.b)?;
        let tt = build_table_table_edges(lake, scorer, options.k, split.tables.as_ref().map(|p| &p.train))?;
        let st = build_nl_table_edges(lake, &split.statements.train);
        Self::from_parts(
            lake.statements.iter().map(|s| s.id.clone()).collect(),
            lake.tables.iter().map(|t| t.id.clone()).collect(),
            st,
            ss,
            tt,
        )
    }

    pub fn n_statements(&self) -> usize {
        self.statement_ids.len()
    }

    pub fn n_tables(&self) -> usize {
        self.table_ids.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_statements() + self.n_tables()
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        if node < self.n_statements() {
            NodeKind::Statement
        } else {
            NodeKind::Table
        }
    }

    pub fn node_id(&self, node: usize) -> &str {
        if node < self.n_statements() {
            &self.statement_ids[node]
        } else {
            &self.table_ids[node - self.n_statements()]
        }
    }

    pub fn statement_node(&self, id: &str) -> Option<usize> {
        self.statement_ids.iter().position(|s| s == id)
    }

    pub fn table_node(&self, id: &str) -> Option<usize> {
        self.table_ids.iter().position(|t| t == id).map(|i| i + self.n_statements())
    }

    /// Statement-table neighbors of `node` (unified indices, sorted).
    pub fn st_neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.st_adjacency[node]
    }

    /// Copy without the listed edges (unified-index pairs, either order).
    pub fn without_edges(&self, removed: &[(usize, usize)]) -> Result<Self> {
        let gone: BTreeSet<(usize, usize)> = removed.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        let ns = self.n_statements();
        let keep = |e: &&Edge| !gone.contains(&(e.src.min(e.dst), e.src.max(e.dst)));
        let st = self
            .edges_st
            .iter()
            .filter(keep)
            .map(|e| Edge {
                src: e.src,
                dst: e.dst - ns,
                weight: e.weight,
            })
            .collect();
        let ss = self.edges_ss.iter().filter(keep).copied().collect();
        let tt = self
            .edges_tt
            .iter()
            .filter(keep)
            .map(|e| Edge {
                src: e.src - ns,
                dst: e.dst - ns,
                weight: e.weight,
            })
            .collect();
        Self::from_parts(self.statement_ids.clone(), self.table_ids.clone(), st, ss, tt)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (x, y) = (a.min(b), a.max(b));
        match (self.kind(x), self.kind(y)) {
            (NodeKind::Statement, NodeKind::Table) => self.st_adjacency[x].iter().any(|&(n, _)| n == y),
            (NodeKind::Statement, NodeKind::Statement) => {
                self.edges_ss.binary_search_by(|e| (e.src, e.dst).cmp(&(x, y))).is_ok()
            }
            _ => self.edges_tt.binary_search_by(|e| (e.src, e.dst).cmp(&(x, y))).is_ok(),
        }
    }

    /// Neighbors reachable from `target` through instances of `path`, one
    /// occurrence per (instance, position) plus a leading self-reference.
    /// Instances are walks over statement-table edges only.
    pub fn enumerate_metapath_neighbors(&self, path: MetaPath, target: usize) -> Result<MetaPathNeighborhood> {
        if target >= self.n_nodes() {
            return Err(Error::InvalidArgument(format!("node {target} out of range")));
        }
        let expected = match path {
            MetaPath::Sts => NodeKind::Statement,
            MetaPath::Tst => NodeKind::Table,
        };
        if self.kind(target) != expected {
            return Err(Error::InvalidArgument(format!(
                "node {} is not a valid {} endpoint",
                self.node_id(target),
                path.name()
            )));
        }
        let mut occurrences = vec![Occurrence {
            node: target,
            instance: None,
        }];
        for &(mid, _) in &self.st_adjacency[target] {
            for &(end, _) in &self.st_adjacency[mid] {
                let instance = Some((target, mid, end));
                occurrences.push(Occurrence { node: mid, instance });
                occurrences.push(Occurrence { node: end, instance });
            }
        }
        Ok(MetaPathNeighborhood {
            target,
            path,
            occurrences,
        })
    }

    /// Like [`enumerate_metapath_neighbors`](Self::enumerate_metapath_neighbors)
    /// but keeping at most `cap` occurrences besides the self-reference,
    /// highest instance weight first.
    pub fn capped_metapath_neighbors(&self, path: MetaPath, target: usize, cap: usize) -> Result<MetaPathNeighborhood> {
        let full = self.enumerate_metapath_neighbors(path, target)?;
        if full.occurrences.len() <= cap + 1 {
            return Ok(full);
        }
        let mut instances: Vec<((usize, usize, usize), f64)> = Vec::new();
        for &(mid, w1) in &self.st_adjacency[target] {
            for &(end, w2) in &self.st_adjacency[mid] {
                instances.push(((target, mid, end), w1 * w2));
            }
        }
        instances.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut occurrences = vec![full.occurrences[0]];
        for (inst, _) in instances.into_iter().take(cap / 2) {
            occurrences.push(Occurrence {
                node: inst.1,
                instance: Some(inst),
            });
            occurrences.push(Occurrence {
                node: inst.2,
                instance: Some(inst),
            });
        }
        Ok(MetaPathNeighborhood {
            target,
            path,
            occurrences,
        })
    }

    /// Serializes as one JSON header line followed by three TSV sections.
    pub fn to_text(&self) -> Result<String> {
        let header = GraphHeader {
            version: GRAPH_FORMAT_VERSION,
            n_statements: self.n_statements(),
            n_tables: self.n_tables(),
            statement_ids: self.statement_ids.clone(),
            table_ids: self.table_ids.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for (name, edges) in [("st", &self.edges_st), ("ss", &self.edges_ss), ("tt", &self.edges_tt)] {
            let _ = writeln!(out, "#edges_{name}\t{}", edges.len());
            for e in edges {
                let _ = writeln!(out, "{}\t{}\t{:.6}", self.node_id(e.src), self.node_id(e.dst), e.weight);
            }
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: GraphHeader = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| Error::Format(format!("graph header: {e}")))?;
        if header.version != GRAPH_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported graph version {}", header.version)));
        }
        let ns = header.n_statements;
        let s_idx: HashMap<&str, usize> = header.statement_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let t_idx: HashMap<&str, usize> = header.table_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut sections: BTreeMap<String, Vec<Edge>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (n, line) in lines.enumerate() {
            if let Some(rest) = line.strip_prefix("#edges_") {
                let name = rest.split('\t').next().unwrap_or("").to_string();
                sections.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("graph line {}: malformed edge", n + 2));
            let section = current.clone().ok_or_else(bad)?;
            let parts: Vec<&str> = line.split('\t').collect();
            let [a, b, w] = parts.as_slice() else { return Err(bad()) };
            let weight: f64 = w.parse().map_err(|_| bad())?;
            let (src, dst) = match section.as_str() {
                "st" => (*s_idx.get(a).ok_or_else(bad)?, *t_idx.get(b).ok_or_else(bad)?),
                "ss" => (*s_idx.get(a).ok_or_else(bad)?, *s_idx.get(b).ok_or_else(bad)?),
                "tt" => (*t_idx.get(a).ok_or_else(bad)?, *t_idx.get(b).ok_or_else(bad)?),
                _ => return Err(bad()),
            };
            sections.get_mut(&section).expect("section exists").push(Edge { src, dst, weight });
        }
        let _ = ns;
        let take = |m: &mut BTreeMap<String, Vec<Edge>>, k: &str| m.remove(k).unwrap_or_default();
        let st = take(&mut sections, "st");
        let ss = take(&mut sections, "ss");
        let tt = take(&mut sections, "tt");
        Self::from_parts(header.statement_ids, header.table_ids, st, ss, tt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Order-sensitive digest of the structure, used to show a graph was not
    /// mutated.
    pub fn structural_hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for id in self.statement_ids.iter().chain(&self.table_ids) {
            h.update(id.as_bytes());
            h.update(&[0]);
        }
        for e in self.edges_st.iter().chain(&self.edges_ss).chain(&self.edges_tt) {
            h.update(&(e.src as u64).to_le_bytes());
            h.update(&(e.dst as u64).to_le_bytes());
            h.update(&e.weight.to_le_bytes());
        }
        h.finalize()
    }
}

const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphHeader {
    version: u32,
    n_statements: usize,
    n_tables: usize,
    statement_ids: Vec<String>,
    table_ids: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Column, Partition};

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn stmt(id: &str, text: &str) -> NlStatement {
        NlStatement {
            id: id.into(),
            text: text.into(),
        }
    }

    fn table(id: &str, header: &str, values: &[&str]) -> Table {
        Table {
            id: id.into(),
            caption: None,
            columns: vec![Column {
                header: Some(header.into()),
                values: values.iter().map(|v| v.to_string()).collect(),
            }],
        }
    }

    #[test]
    fn bm25_toy_value() {
        let docs = vec![toks("red car"), toks("blue sky")];
        let stats = CorpusStats::from_docs(&docs);
        let s = bm25_score(&toks("red"), &docs[0], &stats, 1.2, 0.75).unwrap();
        assert!((s - 2f64.ln()).abs() < 1e-12);
        assert!((s - std::f64::consts::LN_2).abs() < 1e-4);
        assert_eq!(bm25_score(&toks("red"), &docs[1], &stats, 1.2, 0.75).unwrap(), 0.0);
        assert_eq!(bm25_score(&toks("red"), &[], &stats, 1.2, 0.75).unwrap(), 0.0);
    }

    #[test]
    fn bm25_monotone_in_shared_terms() {
        // equal-length docs; more shared query terms never scores lower
        let docs = vec![toks("a b c"), toks("a b z"), toks("a y z")];
        let stats = CorpusStats::from_docs(&docs);
        let q = toks("a b c");
        let shared = |d: &[String]| q.iter().filter(|t| d.contains(t)).count();
        for i in 0..docs.len() {
            for j in 0..docs.len() {
                if shared(&docs[i]) > shared(&docs[j]) {
                    let si = bm25_score(&q, &docs[i], &stats, 1.2, 0.75).unwrap();
                    let sj = bm25_score(&q, &docs[j], &stats, 1.2, 0.75).unwrap();
                    assert!(si >= sj, "doc {i} vs {j}");
                }
            }
        }
    }

    #[test]
    fn nl_edges_link_rare_token_pair() {
        let st = vec![stmt("s1", "zebra migration"), stmt("s2", "zebra herd"), stmt("s3", "stock prices")];
        let edges = build_nl_nl_edges(&st, 1, 1.2, 0.75).unwrap();
        assert!(edges.iter().any(|e| (e.src, e.dst) == (0, 1)));
        assert!(edges.iter().all(|e| e.src != 2 && e.dst != 2));
    }

    #[test]
    fn nl_edges_identical_texts_weight_one() {
        let st = vec![stmt("a", "same words here"), stmt("b", "same words here")];
        let edges = build_nl_nl_edges(&st, 1, 1.2, 0.75).unwrap();
        assert_eq!(edges, vec![Edge { src: 0, dst: 1, weight: 1.0 }]);
    }

    #[test]
    fn nl_edges_saturate_with_large_k() {
        let st = vec![stmt("a", "x y"), stmt("b", "x z"), stmt("c", "y z"), stmt("d", "x y z")];
        let edges = build_nl_nl_edges(&st, 3, 1.2, 0.75).unwrap();
        let docs: Vec<Vec<String>> = st.iter().map(|s| toks(&s.text)).collect();
        let stats = CorpusStats::from_docs(&docs);
        for i in 0..4 {
            for j in i + 1..4 {
                let positive = bm25_score(&docs[i], &docs[j], &stats, 1.2, 0.75).unwrap() > 0.0
                    || bm25_score(&docs[j], &docs[i], &stats, 1.2, 0.75).unwrap() > 0.0;
                let present = edges.iter().any(|e| (e.src, e.dst) == (i, j));
                assert_eq!(positive, present, "pair {i},{j}");
            }
        }
    }

    #[test]
    fn single_statement_has_no_edges() {
        assert!(build_nl_nl_edges(&[stmt("a", "x")], 3, 1.2, 0.75).unwrap().is_empty());
    }

    struct PanicScorer;
    impl TableSimilarityScorer for PanicScorer {
        fn score(&self, _: &Table, _: &Table) -> Result<f64> {
            panic!("scorer must not be called when labels exist");
        }
    }

    #[test]
    fn table_labels_pass_through() {
        let mut tt = BTreeSet::new();
        tt.insert(("tA".to_string(), "tB".to_string()));
        let lake = DataLake::new(
            vec![table("tA", "h", &["1"]), table("tB", "h", &["2"]), table("tC", "h", &["3"])],
            vec![],
            BTreeSet::new(),
            Some(tt),
        )
        .unwrap();
        let edges = build_table_table_edges(&lake, &PanicScorer, 10, None).unwrap();
        assert_eq!(edges, vec![Edge { src: 0, dst: 1, weight: 1.0 }]);
    }

    #[test]
    fn scorer_failure_names_pair() {
        struct NanScorer;
        impl TableSimilarityScorer for NanScorer {
            fn score(&self, _: &Table, _: &Table) -> Result<f64> {
                Ok(f64::NAN)
            }
        }
        let lake = DataLake::new(
            vec![table("tA", "h", &["1"]), table("tB", "h", &["2"])],
            vec![],
            BTreeSet::new(),
            None,
        )
        .unwrap();
        let err = build_table_table_edges(&lake, &NanScorer, 1, None).unwrap_err();
        assert!(err.to_string().contains("tA") && err.to_string().contains("tB"), "{err}");
    }

    #[test]
    fn nl_table_edges_follow_train_split() {
        let mut labels = BTreeSet::new();
        labels.insert(("s1".to_string(), "t2".to_string()));
        labels.insert(("s9".to_string(), "t5".to_string()));
        let lake = DataLake::new(
            vec![table("t2", "h", &[]), table("t5", "h", &[])],
            vec![stmt("s1", "a"), stmt("s9", "b")],
            labels,
            None,
        )
        .unwrap();
        let train: BTreeSet<String> = ["s1".to_string()].into();
        assert_eq!(build_nl_table_edges(&lake, &train), vec![Edge { src: 0, dst: 0, weight: 1.0 }]);
        assert!(build_nl_table_edges(&lake, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn two_node_normalization() {
        let a = normalize_adjacency(&[], &[Edge { src: 0, dst: 1, weight: 1.0 }], &[], 2, 0).unwrap();
        let d = a.to_dense();
        for i in 0..2 {
            for j in 0..2 {
                assert!((d.get(i, j) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_keeps_unit_self_loop() {
        let a = normalize_adjacency(&[], &[Edge { src: 0, dst: 1, weight: 1.0 }], &[], 3, 0).unwrap();
        assert_eq!(a.get(2, 2), 1.0);
        assert_eq!(a.row_entries(2).count(), 1);
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(normalize_adjacency(&[], &[Edge { src: 0, dst: 1, weight: -1.0 }], &[], 2, 0).is_err());
    }

    fn partition(train: &[&str]) -> Partition {
        Partition {
            train: train.iter().map(|s| s.to_string()).collect(),
            ..Partition::default()
        }
    }

    /// Statement s1 linked to t1..t3, nothing else linked back.
    fn star_graph() -> HeteroGraph {
        let st = (0..3).map(|t| Edge { src: 0, dst: t, weight: 1.0 }).collect();
        HeteroGraph::from_parts(
            vec!["s1".into(), "s2".into()],
            vec!["t1".into(), "t2".into(), "t3".into()],
            st,
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn star_neighborhood() {
        let g = star_graph();
        let n = g.enumerate_metapath_neighbors(MetaPath::Sts, 0).unwrap();
        let mut nodes = n.nodes();
        nodes.sort();
        assert_eq!(nodes, vec![0, 0, 0, 0, 2, 3, 4]);
        assert_eq!(n.occurrences[0].instance, None);
    }

    #[test]
    fn isolated_statement_is_self_only() {
        let g = star_graph();
        let n = g.enumerate_metapath_neighbors(MetaPath::Sts, 1).unwrap();
        assert_eq!(n.nodes(), vec![1]);
    }

    #[test]
    fn type_mismatch_errors() {
        let g = star_graph();
        assert!(g.enumerate_metapath_neighbors(MetaPath::Tst, 0).is_err());
        assert!(g.enumerate_metapath_neighbors(MetaPath::Sts, 2).is_err());
    }

    #[test]
    fn graph_text_round_trip() {
        let lake = DataLake::new(
            vec![table("t1", "city", &["paris"]), table("t2", "city", &["rome"])],
            vec![stmt("s1", "paris city"), stmt("s2", "rome city"), stmt("s3", "city")],
            [("s1".to_string(), "t1".to_string())].into(),
            None,
        )
        .unwrap();
        let split = Split {
            statements: partition(&["s1"]),
            tables: None,
        };
        let feat = crate::encoder::HashingFeaturizer::new(32, 1);
        let g = HeteroGraph::build(&lake, &split, &MeanContentScorer::new(&feat), GraphOptions::default()).unwrap();
        let back = HeteroGraph::from_text(&g.to_text().unwrap()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_text().unwrap(), g.to_text().unwrap());
        assert_eq!(back.normalized_adjacency, g.normalized_adjacency);
    }
}
