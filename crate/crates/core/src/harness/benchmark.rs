//! End-to-end runs: split, graph, training, materialization, index,
//! classifier and test-split evaluation, plus sensitivity sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annindex::{AnnIndex, IndexOptions};
use crate::corpus::{split, DataLake, Split};
use crate::error::{Error, Result};
use crate::graphgen::{GraphOptions, HeteroGraph, MeanContentScorer};
use crate::harness::metrics::{compute_binary_metrics, compute_ranked_metrics, Averaging, BinaryMetrics, RankedAtK, TableSets};
use crate::retrieval::{
    train_relevance_classifier, write_results_jsonl, ClassifierOptions, ClassifierReport, LabeledQuery, Mode, Query,
    QueryEmbedder, RelevanceClassifier, ResultRecord, RetrievalEngine,
};
use crate::trainer::{materialize_embeddings, train, EmbeddingTable, Hyperparams};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    pub modes: Vec<Mode>,
    pub ranked_ks: Vec<usize>,
    pub averaging: Averaging,
    /// worker threads for per-query evaluation
    pub threads: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Binary, Mode::Ranked],
            ranked_ks: vec![1, 5, 10],
            averaging: Averaging::Micro,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get().min(8)),
        }
    }
}

/// Wall-clock and memory figures. These vary between runs and are left
/// out of [`MetricsReport::deterministic_json`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub nondeterministic: bool,
    pub graph_seconds: f64,
    pub train_seconds: f64,
    /// materialization plus index build
    pub embedding_seconds: f64,
    pub classifier_seconds: f64,
    pub total_seconds: f64,
    /// mean per-query milliseconds for embedding and retrieval
    pub query_ms_raw: f64,
    /// raw per-query cost plus the one-time embedding cost spread over the
    /// evaluated queries
    pub query_ms_amortized: f64,
    /// peak resident set size from /proc, when available
    pub peak_memory_bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCounts {
    pub n_tables: usize,
    pub n_statements: usize,
    pub n_train_statements: usize,
    pub n_test_queries: usize,
    pub n_edges_st: usize,
    pub n_edges_ss: usize,
    pub n_edges_tt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// binary metrics include queries with empty gold sets; ranked metrics
    /// exclude them
    pub binary: Option<BinaryMetrics>,
    pub ranked: Vec<RankedAtK>,
    pub classifier: Option<ClassifierReport>,
    pub best_epoch: usize,
    pub best_val_score: f64,
    pub path_weights: BTreeMap<String, f64>,
    pub counts: RunCounts,
    pub timing: Timing,
}

impl MetricsReport {
    /// The report without timing fields, as pretty JSON.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn binary_f1(&self) -> Option<f64> {
        self.binary.as_ref().map(|b| b.f1)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ranked.iter().find(|r| r.k == k).map(|r| r.recall)
    }
}

fn peak_memory_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Test-split queries with gold table sets: statements always, tables
/// when the lake has table-table labels.
pub fn test_queries(lake: &DataLake, split: &Split) -> (Vec<Query>, TableSets) {
    let (queries, gold) = partition_queries(lake, split, |p| &p.test);
    (queries, gold)
}

fn partition_queries(
    lake: &DataLake,
    split: &Split,
    pick: impl Fn(&crate::corpus::Partition) -> &BTreeSet<String>,
) -> (Vec<Query>, TableSets) {
    let mut queries = Vec::new();
    let mut gold = TableSets::new();
    let ids = pick(&split.statements);
    for s in lake.statements.iter().filter(|s| ids.contains(&s.id)) {
        queries.push(Query::Nl(s.clone()));
        gold.insert(s.id.clone(), BTreeSet::new());
    }
    for (s, t) in &lake.nl_table_labels {
        if let Some(g) = gold.get_mut(s) {
            g.insert(t.clone());
        }
    }
    if let (Some(parts), Some(labels)) = (&split.tables, &lake.table_table_labels) {
        let ids = pick(parts);
        let mut table_gold = TableSets::new();
        for t in lake.tables.iter().filter(|t| ids.contains(&t.id)) {
            queries.push(Query::Table(t.clone()));
            table_gold.insert(t.id.clone(), BTreeSet::new());
        }
        for (a, b) in labels {
            if let Some(g) = table_gold.get_mut(a) {
                g.insert(b.clone());
            }
        }
        // table and statement ids may collide; table queries get a prefix
        for (k, v) in table_gold {
            gold.insert(format!("table:{k}"), v);
        }
    }
    (queries, gold)
}

fn query_key(q: &Query) -> String {
    match q {
        Query::Nl(s) => s.id.clone(),
        Query::Table(t) => format!("table:{}", t.id),
    }
}

/// Query-time embeddings of labeled queries, the same way test queries
/// are embedded, for classifier training.
fn labeled(embedder: &QueryEmbedder, queries: &[Query], gold: &TableSets) -> Result<Vec<LabeledQuery>> {
    queries
        .iter()
        .map(|q| {
            Ok(LabeledQuery {
                id: query_key(q),
                vector: embedder.embed(q)?.vector,
                relevant: gold[&query_key(q)].clone(),
            })
        })
        .collect()
}

/// Trains the relevance classifier on training-split queries and reports
/// validation F1.
pub fn fit_classifier(
    lake: &DataLake,
    split: &Split,
    embedder: &QueryEmbedder,
    tables: &EmbeddingTable,
    hyper: &Hyperparams,
) -> Result<(RelevanceClassifier, ClassifierReport)> {
    let (train_q, train_gold) = partition_queries(lake, split, |p| &p.train);
    let (val_q, val_gold) = partition_queries(lake, split, |p| &p.val);
    let train_set = labeled(embedder, &train_q, &train_gold)?;
    let val_set = labeled(embedder, &val_q, &val_gold)?;
    train_relevance_classifier(
        &train_set,
        &val_set,
        tables.table_ids(),
        &tables.table_vectors(),
        ClassifierOptions::from_hyper(hyper),
    )
}

pub fn build_graph(lake: &DataLake, split: &Split, hyper: &Hyperparams) -> Result<HeteroGraph> {
    let featurizer = hyper.featurizer()?;
    let scorer = MeanContentScorer::new(featurizer.as_ref());
    HeteroGraph::build(
        lake,
        split,
        &scorer,
        GraphOptions {
            k: hyper.k,
            ..Default::default()
        },
    )
}

/// Runs `queries` through `engine` on up to `threads` workers, keeping
/// input order.
pub fn evaluate_queries(engine: &RetrievalEngine, queries: &[Query], mode: Mode, k: usize, threads: usize) -> Result<Vec<ResultRecord>> {
    let threads = threads.clamp(1, queries.len().max(1));
    let chunk = queries.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|q| {
                            let mut r = engine.retrieve(q, mode, k)?;
                            r.query_id = query_key(q);
                            Ok(r)
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(queries.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Runtime("query worker panicked".into()))??);
        }
        Ok(out)
    })
}

/// The whole pipeline. Artifacts go to `output_dir`; an `INCOMPLETE` file
/// names the failing stage if a stage errors.
pub fn run_benchmark(lake: &DataLake, hyper: &Hyperparams, opts: &BenchmarkOptions, output_dir: &Path) -> Result<MetricsReport> {
    fs::create_dir_all(output_dir)?;
    let marker = output_dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, "started\n")?;
    let mut stage = "setup";
    let result = run_stages(lake, hyper, opts, output_dir, &mut stage);
    match &result {
        Ok(_) => fs::remove_file(&marker)?,
        Err(e) => fs::write(&marker, format!("failed at stage {stage}: {e}\n"))?,
    }
    result
}

fn run_stages(
    lake: &DataLake,
    hyper: &Hyperparams,
    opts: &BenchmarkOptions,
    out: &Path,
    stage: &mut &'static str,
) -> Result<MetricsReport> {
    let start = Instant::now();
    hyper.validate()?;
    if opts.modes.is_empty() {
        return Err(Error::InvalidArgument("no evaluation modes requested".into()));
    }
    fs::write(out.join("config.json"), serde_json::to_string_pretty(hyper)?)?;

    *stage = "split";
    let sp = split(lake, &hyper.split)?;

    *stage = "graph";
    let t = Instant::now();
    let graph = build_graph(lake, &sp, hyper)?;
    graph.save(&out.join("graph.txt"))?;
    let graph_seconds = t.elapsed().as_secs_f64();

    *stage = "train";
    let t = Instant::now();
    let trained = train(lake, &graph, &sp, hyper)?;
    let train_seconds = t.elapsed().as_secs_f64();
    trained.checkpoint.save(&out.join("checkpoint.bin"))?;
    fs::write(out.join("trace.json"), serde_json::to_string_pretty(&trained.trace)?)?;

    *stage = "materialize";
    let t = Instant::now();
    let emb = materialize_embeddings(&trained.checkpoint, &graph, lake)?;
    emb.save(&out.join("embeddings.bin"))?;
    let index = AnnIndex::build(
        emb.table_ids().to_vec(),
        &emb.table_vectors(),
        IndexOptions {
            n_trees: hyper.n_trees,
            leaf_capacity: hyper.leaf_capacity,
            seed: hyper.seed,
        },
    )?;
    index.save(&out.join("index.bin"))?;
    let embedding_seconds = t.elapsed().as_secs_f64();
    let embedder = QueryEmbedder::new(&trained.checkpoint, lake, &emb.path_weights)?;

    let t = Instant::now();
    let (classifier, report) = if opts.modes.contains(&Mode::Binary) {
        *stage = "classifier";
        let (c, r) = fit_classifier(lake, &sp, &embedder, &emb, hyper)?;
        c.save(&r, &out.join("classifier.bin"))?;
        (Some(c), Some(r))
    } else {
        (None, None)
    };
    let classifier_seconds = t.elapsed().as_secs_f64();

    *stage = "evaluate";
    let engine = RetrievalEngine::new(embedder, index, classifier, hyper);
    let (queries, gold) = test_queries(lake, &sp);
    let mut binary = None;
    let mut ranked = Vec::new();
    let t = Instant::now();
    let mut n_evaluated = 0usize;
    for &mode in &opts.modes {
        let k = match mode {
            Mode::Ranked => opts.ranked_ks.iter().copied().max().unwrap_or(hyper.top_k).max(hyper.top_k),
            Mode::Binary => 0,
        };
        let records = evaluate_queries(&engine, &queries, mode, k, opts.threads)?;
        n_evaluated += records.len();
        let name = match mode {
            Mode::Ranked => "results_ranked.jsonl",
            Mode::Binary => "results_binary.jsonl",
        };
        write_results_jsonl(&out.join(name), &records)?;
        match mode {
            Mode::Binary => {
                let predicted: TableSets = records
                    .iter()
                    .map(|r| (r.query_id.clone(), r.results.iter().map(|s| s.table_id.clone()).collect()))
                    .collect();
                binary = Some(compute_binary_metrics(&predicted, &gold, opts.averaging)?);
            }
            Mode::Ranked => {
                let lists: BTreeMap<String, Vec<String>> = records
                    .iter()
                    .map(|r| (r.query_id.clone(), r.results.iter().map(|s| s.table_id.clone()).collect()))
                    .collect();
                ranked = compute_ranked_metrics(&lists, &gold, &opts.ranked_ks)?;
            }
        }
    }
    let query_seconds = t.elapsed().as_secs_f64();
    let per_query = |extra: f64| {
        if n_evaluated == 0 {
            0.0
        } else {
            (query_seconds + extra) * 1e3 / n_evaluated as f64
        }
    };

    let report = MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        binary,
        ranked,
        classifier: report,
        best_epoch: trained.checkpoint.epoch,
        best_val_score: trained.checkpoint.val_score,
        path_weights: emb
            .path_weights
            .iter()
            .map(|(p, w)| (p.name().to_string(), *w))
            .collect(),
        counts: RunCounts {
            n_tables: lake.tables.len(),
            n_statements: lake.statements.len(),
            n_train_statements: sp.statements.train.len(),
            n_test_queries: queries.len(),
            n_edges_st: graph.edges_st.len(),
            n_edges_ss: graph.edges_ss.len(),
            n_edges_tt: graph.edges_tt.len(),
        },
        timing: Timing {
            nondeterministic: true,
            graph_seconds,
            train_seconds,
            embedding_seconds,
            classifier_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
            query_ms_raw: per_query(0.0),
            query_ms_amortized: per_query(embedding_seconds),
            peak_memory_bytes: peak_memory_bytes(),
        },
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TrainFraction,
    K,
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::TrainFraction => vec![0.01, 0.05, 0.10, 0.20],
            SweepAxis::K => vec![1.0, 5.0, 10.0, 15.0, 20.0],
        }
    }

    /// `hyper` with this axis set to `value`. Changing the training
    /// fraction keeps the validation fraction and gives the rest to test.
    pub fn apply(self, hyper: &Hyperparams, value: f64) -> Result<Hyperparams> {
        let mut h = hyper.clone();
        match self {
            SweepAxis::TrainFraction => {
                h.split.train_frac = value;
                h.split.test_frac = 1.0 - value - h.split.val_frac;
            }
            SweepAxis::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!("K must be a positive integer, got {value}")));
                }
                h.k = value as usize;
            }
        }
        h.validate()?;
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub metrics: MetricsReport,
}

/// One benchmark per value, each in its own subdirectory; rows are also
/// written to `sweep.json`.
pub fn run_sweep(
    lake: &DataLake,
    hyper: &Hyperparams,
    axis: SweepAxis,
    values: &[f64],
    opts: &BenchmarkOptions,
    output_dir: &Path,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let h = axis.apply(hyper, value)?;
        let name = match axis {
            SweepAxis::TrainFraction => format!("train_fraction_{value}"),
            SweepAxis::K => format!("k_{value}"),
        };
        let metrics = run_benchmark(lake, &h, opts, &output_dir.join(name))?;
        rows.push(SweepRow { axis, value, metrics });
    }
    fs::write(output_dir.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

/// Gold sets of an arbitrary id list, for CLI evaluation of result files.
pub fn gold_sets(lake: &DataLake) -> TableSets {
    let mut gold: TableSets = lake.statements.iter().map(|s| (s.id.clone(), BTreeSet::new())).collect();
    for (s, t) in &lake.nl_table_labels {
        gold.entry(s.clone()).or_default().insert(t.clone());
    }
    if let Some(labels) = &lake.table_table_labels {
        for t in &lake.tables {
            gold.insert(format!("table:{}", t.id), BTreeSet::new());
        }
        for (a, b) in labels {
            gold.entry(format!("table:{a}")).or_default().insert(b.clone());
        }
    }
    gold
}
