use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lakescope::annindex::{AnnIndex, IndexOptions};
use lakescope::corpus::{split, DataLake, NlStatement};
use lakescope::graphgen::HeteroGraph;
use lakescope::harness::benchmark::{build_graph, fit_classifier, gold_sets, run_benchmark, run_sweep, BenchmarkOptions, SweepAxis};
use lakescope::harness::metrics::{compute_binary_metrics, compute_ranked_metrics, Averaging, TableSets};
use lakescope::harness::synthetic::{generate_synthetic_lake, SyntheticSpec};
use lakescope::retrieval::{read_results_jsonl, Mode, Query, QueryEmbedder, RelevanceClassifier, RetrievalEngine};
use lakescope::trainer::{materialize_embeddings, train, Checkpoint, EmbeddingTable, Hyperparams};
use lakescope::{Error, Result};

#[derive(Parser)]
#[command(name = "lakescope", version, about = "Table discovery over a data lake with graph embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ranked,
    Binary,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ranked => Mode::Ranked,
            ModeArg::Binary => Mode::Binary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    TrainFraction,
    K,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic lake directory
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// JSON file with synthetic lake settings
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise_rate: Option<f64>,
    },
    /// Split the lake and build the heterogeneous graph
    BuildGraph {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write the best checkpoint
    Train {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// per-epoch losses and validation scores as JSON
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Materialize embeddings and build the table index
    Index {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the binary-retrieval relevance classifier
    TrainClassifier {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve tables for the queries in a file
    Query {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ranked")]
        mode: ModeArg,
        #[arg(long)]
        k: Option<usize>,
        /// statement JSON lines, or one table CSV
        #[arg(long, required_unless_present = "text")]
        query_file: Option<PathBuf>,
        /// a single statement given inline
        #[arg(long, conflicts_with = "query_file")]
        text: Option<String>,
        /// results file; stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a results file against the lake's labels
    Evaluate {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        /// per-query averaging instead of pooled decisions
        #[arg(long = "macro")]
        macro_avg: bool,
    },
    /// Run the whole pipeline and write every artifact plus metrics
    Benchmark {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat the benchmark over one axis
    Sweep {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn hyper(config: Option<&Path>) -> Result<Hyperparams> {
    match config {
        Some(p) => Hyperparams::from_json_file(p),
        None => Ok(Hyperparams::default()),
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            out,
            spec,
            seed,
            noise_rate,
        } => {
            let mut s: SyntheticSpec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?,
                None => SyntheticSpec::default(),
            };
            if let Some(v) = seed {
                s.seed = v;
            }
            if let Some(v) = noise_rate {
                s.noise_rate = v;
            }
            let lake = generate_synthetic_lake(&s)?;
            lake.save(&out)?;
            log::info!("wrote {} tables and {} statements", lake.tables.len(), lake.statements.len());
        }
        Command::BuildGraph { lake, config, out } => {
            let h = hyper(config.as_deref())?;
            let lake = DataLake::load_dir(&lake)?;
            let sp = split(&lake, &h.split)?;
            build_graph(&lake, &sp, &h)?.save(&out)?;
        }
        Command::Train {
            lake,
            graph,
            config,
            out,
            trace,
        } => {
            let h = hyper(config.as_deref())?;
            let lake = DataLake::load_dir(&lake)?;
            let graph = HeteroGraph::load(&graph)?;
            let sp = split(&lake, &h.split)?;
            let result = train(&lake, &graph, &sp, &h)?;
            result.checkpoint.save(&out)?;
            if let Some(t) = trace {
                std::fs::write(t, serde_json::to_string_pretty(&result.trace)?)?;
            }
            log::info!(
                "best epoch {} with validation score {:.4}",
                result.checkpoint.epoch,
                result.checkpoint.val_score
            );
        }
        Command::Index {
            lake,
            graph,
            checkpoint,
            embeddings,
            out,
        } => {
            let lake = DataLake::load_dir(&lake)?;
            let graph = HeteroGraph::load(&graph)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let emb = materialize_embeddings(&ck, &graph, &lake)?;
            emb.save(&embeddings)?;
            let index = AnnIndex::build(
                emb.table_ids().to_vec(),
                &emb.table_vectors(),
                IndexOptions {
                    n_trees: ck.hyper.n_trees,
                    leaf_capacity: ck.hyper.leaf_capacity,
                    seed: ck.hyper.seed,
                },
            )?;
            index.save(&out)?;
        }
        Command::TrainClassifier {
            lake,
            checkpoint,
            embeddings,
            out,
        } => {
            let lake = DataLake::load_dir(&lake)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let emb = EmbeddingTable::load(&embeddings)?;
            let sp = split(&lake, &ck.hyper.split)?;
            let embedder = QueryEmbedder::new(&ck, &lake, &emb.path_weights)?;
            let (clf, report) = fit_classifier(&lake, &sp, &embedder, &emb, &ck.hyper)?;
            clf.save(&report, &out)?;
            print_json(&report)?;
        }
        Command::Query {
            lake,
            checkpoint,
            embeddings,
            index,
            classifier,
            mode,
            k,
            query_file,
            text,
            out,
        } => {
            let lake = DataLake::load_dir(&lake)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let emb = EmbeddingTable::load(&embeddings)?;
            let classifier = classifier
                .map(|p| RelevanceClassifier::load(&p).map(|(c, _)| c))
                .transpose()?;
            let engine = RetrievalEngine::new(
                QueryEmbedder::new(&ck, &lake, &emb.path_weights)?,
                AnnIndex::load(&index)?,
                classifier,
                &ck.hyper,
            );
            let queries = match (query_file, text) {
                (Some(p), _) => Query::load_file(&p)?,
                (None, Some(t)) => vec![Query::Nl(NlStatement {
                    id: "query".into(),
                    text: t,
                })],
                (None, None) => return Err(Error::InvalidArgument("give --query-file or --text".into())),
            };
            let k = k.unwrap_or(ck.hyper.top_k);
            let mut lines = String::new();
            for q in &queries {
                lines.push_str(&serde_json::to_string(&engine.retrieve(q, mode.into(), k)?)?);
                lines.push('\n');
            }
            match out {
                Some(p) => std::fs::write(p, lines)?,
                None => emit(&lines)?,
            }
        }
        Command::Evaluate {
            lake,
            results,
            ks,
            macro_avg,
        } => {
            let lake = DataLake::load_dir(&lake)?;
            let gold = gold_sets(&lake);
            let records = read_results_jsonl(&results)?;
            let averaging = if macro_avg { Averaging::Macro } else { Averaging::Micro };
            let mut report = serde_json::Map::new();
            let binary: TableSets = records
                .iter()
                .filter(|r| r.mode == Mode::Binary)
                .map(|r| (r.query_id.clone(), r.results.iter().map(|s| s.table_id.clone()).collect()))
                .collect();
            if !binary.is_empty() {
                let m = compute_binary_metrics(&binary, &gold, averaging)?;
                report.insert("binary".into(), serde_json::to_value(m)?);
            }
            let ranked: BTreeMap<String, Vec<String>> = records
                .iter()
                .filter(|r| r.mode == Mode::Ranked)
                .map(|r| (r.query_id.clone(), r.results.iter().map(|s| s.table_id.clone()).collect()))
                .collect();
            if !ranked.is_empty() {
                let m = compute_ranked_metrics(&ranked, &gold, &ks)?;
                report.insert("ranked".into(), serde_json::to_value(m)?);
            }
            print_json(&report)?;
        }
        Command::Benchmark { lake, config, out } => {
            let h = hyper(config.as_deref())?;
            let lake = DataLake::load_dir(&lake)?;
            let m = run_benchmark(&lake, &h, &BenchmarkOptions::default(), &out)?;
            print_json(&m)?;
        }
        Command::Sweep {
            lake,
            config,
            axis,
            values,
            out,
        } => {
            let h = hyper(config.as_deref())?;
            let lake = DataLake::load_dir(&lake)?;
            let axis = match axis {
                AxisArg::TrainFraction => SweepAxis::TrainFraction,
                AxisArg::K => SweepAxis::K,
            };
            let values = values.unwrap_or_else(|| axis.default_values());
            let rows = run_sweep(&lake, &h, axis, &values, &BenchmarkOptions::default(), &out)?;
            for r in &rows {
                emit(&format!(
                    "{}\tf1={}\tr@10={}\n",
                    r.value,
                    r.metrics.binary_f1().map_or("-".into(), |f| format!("{f:.4}")),
                    r.metrics.recall_at(10).map_or("-".into(), |f| format!("{f:.4}"))
                ))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
