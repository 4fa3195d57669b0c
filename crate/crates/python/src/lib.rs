//! Python bindings: synthetic lakes, the benchmark pipeline, a query
//! engine over saved artifacts, and the metric functions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lakescope::annindex::AnnIndex;
use lakescope::corpus::{DataLake, NlStatement};
use lakescope::harness::benchmark::{run_benchmark as run_pipeline, BenchmarkOptions};
use lakescope::harness::metrics::{compute_binary_metrics, compute_ranked_metrics, Averaging, TableSets};
use lakescope::harness::synthetic::{generate_synthetic_lake as generate, SyntheticSpec};
use lakescope::retrieval::{Mode, Query, QueryEmbedder, RelevanceClassifier, RetrievalEngine};
use lakescope::trainer::{Checkpoint, EmbeddingTable, Hyperparams};

fn py_err(e: lakescope::Error) -> PyErr {
    if e.exit_code() == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Writes a synthetic lake to `out_dir`; returns (tables, statements).
#[pyfunction]
#[pyo3(signature = (out_dir, seed=1, noise_rate=0.1))]
fn generate_synthetic_lake(out_dir: PathBuf, seed: u64, noise_rate: f64) -> PyResult<(usize, usize)> {
    let spec = SyntheticSpec {
        seed,
        noise_rate,
        ..Default::default()
    };
    let lake = generate(&spec).map_err(py_err)?;
    lake.save(&out_dir).map_err(py_err)?;
    Ok((lake.tables.len(), lake.statements.len()))
}

/// Full pipeline on the lake in `lake_dir`; returns the metrics JSON.
/// `config_json` holds hyperparameter overrides.
#[pyfunction]
#[pyo3(signature = (lake_dir, out_dir, config_json=None))]
fn run_benchmark(py: Python<'_>, lake_dir: PathBuf, out_dir: PathBuf, config_json: Option<String>) -> PyResult<String> {
    let hyper: Hyperparams = match config_json {
        Some(s) => serde_json::from_str(&s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => Hyperparams::default(),
    };
    py.detach(|| {
        let lake = DataLake::load_dir(&lake_dir)?;
        let report = run_pipeline(&lake, &hyper, &BenchmarkOptions::default(), &out_dir)?;
        Ok(serde_json::to_string(&report)?)
    })
    .map_err(py_err)
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    mode.parse().map_err(py_err)
}

/// Query engine over the artifacts a benchmark run writes.
#[pyclass]
struct Engine {
    inner: RetrievalEngine,
}

#[pymethods]
impl Engine {
    #[new]
    fn new(lake_dir: PathBuf, artifacts_dir: PathBuf) -> PyResult<Self> {
        let load = || -> lakescope::Result<RetrievalEngine> {
            let lake = DataLake::load_dir(&lake_dir)?;
            let ck = Checkpoint::load(&artifacts_dir.join("checkpoint.bin"))?;
            let emb = EmbeddingTable::load(&artifacts_dir.join("embeddings.bin"))?;
            let index = AnnIndex::load(&artifacts_dir.join("index.bin"))?;
            let clf_path = artifacts_dir.join("classifier.bin");
            let classifier = if clf_path.exists() {
                Some(RelevanceClassifier::load(&clf_path)?.0)
            } else {
                None
            };
            let embedder = QueryEmbedder::new(&ck, &lake, &emb.path_weights)?;
            Ok(RetrievalEngine::new(embedder, index, classifier, &ck.hyper))
        };
        Ok(Self { inner: load().map_err(py_err)? })
    }

    /// Unit-norm embedding of a statement.
    fn embed(&self, text: String) -> PyResult<Vec<f64>> {
        let q = Query::Nl(NlStatement {
            id: "query".into(),
            text,
        });
        Ok(self.inner.embed(&q).map_err(py_err)?.vector)
    }

    /// (table id, score) pairs for a statement.
    #[pyo3(signature = (text, mode="ranked", k=10))]
    fn query(&self, text: String, mode: &str, k: usize) -> PyResult<Vec<(String, f64)>> {
        let q = Query::Nl(NlStatement {
            id: "query".into(),
            text,
        });
        self.run(&q, mode, k)
    }

    /// (table id, score) pairs for a table given as a CSV file.
    #[pyo3(signature = (path, mode="ranked", k=10))]
    fn query_table(&self, path: PathBuf, mode: &str, k: usize) -> PyResult<Vec<(String, f64)>> {
        let mut qs = Query::load_file(Path::new(&path)).map_err(py_err)?;
        match (qs.pop(), qs.is_empty()) {
            (Some(q @ Query::Table(_)), true) => self.run(&q, mode, k),
            _ => Err(PyValueError::new_err("expected a single table CSV")),
        }
    }

    fn n_tables(&self) -> usize {
        self.inner.index.len()
    }
}

impl Engine {
    fn run(&self, q: &Query, mode: &str, k: usize) -> PyResult<Vec<(String, f64)>> {
        let r = self.inner.retrieve(q, parse_mode(mode)?, k).map_err(py_err)?;
        Ok(r.results.into_iter().map(|s| (s.table_id, s.score)).collect())
    }
}

fn to_sets(m: BTreeMap<String, Vec<String>>) -> TableSets {
    m.into_iter()
        .map(|(k, v)| (k, v.into_iter().collect::<BTreeSet<_>>()))
        .collect()
}

/// (precision, recall, F1) of predicted table sets against gold sets.
#[pyfunction]
#[pyo3(signature = (predicted, gold, macro_average=false))]
fn binary_metrics(
    predicted: BTreeMap<String, Vec<String>>,
    gold: BTreeMap<String, Vec<String>>,
    macro_average: bool,
) -> PyResult<(f64, f64, f64)> {
    let avg = if macro_average { Averaging::Macro } else { Averaging::Micro };
    let m = compute_binary_metrics(&to_sets(predicted), &to_sets(gold), avg).map_err(py_err)?;
    Ok((m.precision, m.recall, m.f1))
}

/// (k, P@k, R@k) per k.
#[pyfunction]
fn ranked_metrics(
    ranked: BTreeMap<String, Vec<String>>,
    gold: BTreeMap<String, Vec<String>>,
    ks: Vec<usize>,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let rows = compute_ranked_metrics(&ranked, &to_sets(gold), &ks).map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.k, r.precision, r.recall)).collect())
}

#[pymodule]
fn lakescope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_synthetic_lake, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(binary_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(ranked_metrics, m)?)?;
    m.add_class::<Engine>()?;
    Ok(())
}
