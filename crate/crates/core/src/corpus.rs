//! Data-lake model, file ingestion and deterministic splits.
//!
//! On-disk layout of a lake directory:
//!
//! ```text
//! tables/<id>.csv        one CSV per table (RFC 4180, header row optional)
//! tables/metadata.jsonl  optional {"id", "caption", "header"} sidecar records
//! statements.jsonl       {"id", "text"} per line
//! labels.tsv             statement_id <TAB> table_id
//! table_labels.tsv       optional table_id <TAB> table_id
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METADATA_FILE: &str = "metadata.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub header: Option<String>,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub caption: Option<String>,
    pub columns: Vec<Column>,
}

impl Table {
    pub fn n_rows(&self) -> usize {
        self.columns.iter().map(|c| c.values.len()).max().unwrap_or(0)
    }

    /// All text of the table (caption, headers, cells) joined by spaces.
    pub fn full_text(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if let Some(c) = &self.caption {
            parts.push(c);
        }
        for col in &self.columns {
            if let Some(h) = &col.header {
                parts.push(h);
            }
            parts.extend(col.values.iter().map(String::as_str));
        }
        parts.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NlStatement {
    pub id: String,
    pub text: String,
}

/// Tables, statements and ground-truth relevance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataLake {
    pub tables: Vec<Table>,
    pub statements: Vec<NlStatement>,
    /// (statement_id, table_id) relevant pairs.
    pub nl_table_labels: BTreeSet<(String, String)>,
    /// Symmetric-closed (table_id, table_id) relevant pairs.
    pub table_table_labels: Option<BTreeSet<(String, String)>>,
}

impl DataLake {
    /// Validates every invariant and closes table labels under symmetry.
    pub fn new(
        tables: Vec<Table>,
        statements: Vec<NlStatement>,
        nl_table_labels: BTreeSet<(String, String)>,
        table_table_labels: Option<BTreeSet<(String, String)>>,
    ) -> Result<Self> {
        let mut table_ids = HashSet::new();
        for t in &tables {
            if t.id.is_empty() {
                return Err(Error::Validation("table with empty id".into()));
            }
            if !table_ids.insert(t.id.as_str()) {
                return Err(Error::Validation(format!("duplicate table id {:?}", t.id)));
            }
            if t.columns.is_empty() {
                return Err(Error::Validation(format!("table {:?} has no columns", t.id)));
            }
        }
        let mut stmt_ids = HashSet::new();
        for s in &statements {
            if s.id.is_empty() {
                return Err(Error::Validation("statement with empty id".into()));
            }
            if !stmt_ids.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate statement id {:?}", s.id)));
            }
            if s.text.trim().is_empty() {
                return Err(Error::Validation(format!("statement {:?} has empty text", s.id)));
            }
        }
        let mut dangling: BTreeSet<String> = BTreeSet::new();
        for (s, t) in &nl_table_labels {
            if !stmt_ids.contains(s.as_str()) {
                dangling.insert(s.clone());
            }
            if !table_ids.contains(t.as_str()) {
                dangling.insert(t.clone());
            }
        }
        let table_table_labels = match table_table_labels {
            None => None,
            Some(labels) => {
                let mut closed = BTreeSet::new();
                for (a, b) in labels {
                    for id in [&a, &b] {
                        if !table_ids.contains(id.as_str()) {
                            dangling.insert(id.clone());
                        }
                    }
                    if a == b {
                        return Err(Error::Validation(format!("self-referencing table label {a:?}")));
                    }
                    closed.insert((b.clone(), a.clone()));
                    closed.insert((a, b));
                }
                Some(closed)
            }
        };
        if !dangling.is_empty() {
            let ids: Vec<String> = dangling.into_iter().collect();
            return Err(Error::Validation(format!(
                "labels reference unknown ids: {}",
                ids.join(", ")
            )));
        }
        Ok(Self {
            tables,
            statements,
            nl_table_labels,
            table_table_labels,
        })
    }

    pub fn table(&self, id: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.id == id)
    }

    pub fn statement(&self, id: &str) -> Option<&NlStatement> {
        self.statements.iter().find(|s| s.id == id)
    }

    /// Gold tables per statement id.
    pub fn gold_tables(&self) -> HashMap<&str, BTreeSet<&str>> {
        let mut out: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        for (s, t) in &self.nl_table_labels {
            out.entry(s.as_str()).or_default().insert(t.as_str());
        }
        out
    }

    /// Writes the lake in the directory layout described at module level.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tables_dir = dir.join("tables");
        fs::create_dir_all(&tables_dir)?;
        let mut meta = Vec::new();
        for t in &self.tables {
            let has_header = t.columns.iter().any(|c| c.header.is_some());
            write_table_csv(&tables_dir.join(format!("{}.csv", t.id)), t, has_header)?;
            if t.caption.is_some() || !has_header {
                meta.push(TableMeta {
                    id: t.id.clone(),
                    caption: t.caption.clone(),
                    header: if has_header { None } else { Some(false) },
                });
            }
        }
        let mut f = fs::File::create(tables_dir.join(METADATA_FILE))?;
        for m in &meta {
            writeln!(f, "{}", serde_json::to_string(m)?)?;
        }
        let mut f = fs::File::create(dir.join("statements.jsonl"))?;
        for s in &self.statements {
            writeln!(f, "{}", serde_json::to_string(s)?)?;
        }
        write_label_tsv(&dir.join("labels.tsv"), &self.nl_table_labels)?;
        if let Some(tt) = &self.table_table_labels {
            let half: BTreeSet<(String, String)> = tt.iter().filter(|(a, b)| a < b).cloned().collect();
            write_label_tsv(&dir.join("table_labels.tsv"), &half)?;
        }
        Ok(())
    }

    /// Loads a lake saved with [`DataLake::save`].
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let table_labels = dir.join("table_labels.tsv");
        load_datalake(
            &dir.join("tables"),
            &dir.join("statements.jsonl"),
            &dir.join("labels.tsv"),
            table_labels.exists().then_some(table_labels.as_path()),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableMeta {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    /// `false` when the CSV has no header row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    header: Option<bool>,
}

fn write_table_csv(path: &Path, t: &Table, has_header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_path(path).map_err(csv_io)?;
    if has_header {
        w.write_record(t.columns.iter().map(|c| c.header.as_deref().unwrap_or("")))
            .map_err(csv_io)?;
    }
    for r in 0..t.n_rows() {
        w.write_record(t.columns.iter().map(|c| c.values.get(r).map_or("", String::as_str)))
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn write_label_tsv(path: &Path, labels: &BTreeSet<(String, String)>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for (a, b) in labels {
        writeln!(f, "{a}\t{b}")?;
    }
    Ok(())
}

pub fn read_table_csv(path: &Path, id: &str, has_header: bool, caption: Option<String>) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|e| ingest_err(path, &e))?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ingest_err(path, &e))?;
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    let width = rows.first().map_or(0, Vec::len);
    let mut columns: Vec<Column> = (0..width)
        .map(|_| Column {
            header: None,
            values: Vec::new(),
        })
        .collect();
    let mut body = rows.into_iter();
    if has_header {
        if let Some(header) = body.next() {
            for (c, h) in columns.iter_mut().zip(header) {
                c.header = (!h.is_empty()).then_some(h);
            }
        }
    }
    for row in body {
        for (c, v) in columns.iter_mut().zip(row) {
            c.values.push(v);
        }
    }
    Ok(Table {
        id: id.to_owned(),
        caption,
        columns,
    })
}

fn ingest_err(path: &Path, e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Ingest {
        file: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(u64, String)>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i as u64 + 1, line));
    }
    Ok(out)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| Error::Ingest {
                file: path.to_path_buf(),
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads a two-column TSV of id pairs.
pub fn read_pair_tsv(path: &Path) -> Result<BTreeSet<(String, String)>> {
    let mut out = BTreeSet::new();
    for (line, text) in read_lines(path)? {
        let mut parts = text.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                if !out.insert((a.to_owned(), b.to_owned())) {
                    log::warn!("{}:{line}: duplicate label ignored", path.display());
                }
            }
            _ => {
                return Err(Error::Ingest {
                    file: path.to_path_buf(),
                    line,
                    message: "expected two tab-separated ids".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Loads and validates a data lake. CSV files are ingested in
/// filename-lexicographic order.
pub fn load_datalake(
    tables_dir: &Path,
    statements_file: &Path,
    labels_file: &Path,
    table_labels_file: Option<&Path>,
) -> Result<DataLake> {
    let mut meta: HashMap<String, TableMeta> = HashMap::new();
    let meta_path = tables_dir.join(METADATA_FILE);
    if meta_path.exists() {
        for m in read_jsonl::<TableMeta>(&meta_path)? {
            meta.insert(m.id.clone(), m);
        }
    }
    let mut csv_paths: Vec<PathBuf> = fs::read_dir(tables_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csv_paths.sort();
    let mut tables = Vec::with_capacity(csv_paths.len());
    for path in &csv_paths {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("non-UTF-8 table file name {}", path.display())))?
            .to_owned();
        let m = meta.get(&id);
        let has_header = m.and_then(|m| m.header).unwrap_or(true);
        let caption = m.and_then(|m| m.caption.clone());
        tables.push(read_table_csv(path, &id, has_header, caption)?);
    }
    let statements: Vec<NlStatement> = read_jsonl(statements_file)?;
    let labels = read_pair_tsv(labels_file)?;
    let table_labels = table_labels_file.map(read_pair_tsv).transpose()?;
    DataLake::new(tables, statements, labels, table_labels)
}

/// Train/validation/test fractions and shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.2,
            val_frac: 0.2,
            test_frac: 0.6,
            seed: 7,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train", self.train_frac),
            ("val", self.val_frac),
            ("test", self.test_frac),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} fraction {f} outside (0,1)")));
            }
        }
        let total = self.train_frac + self.val_frac + self.test_frac;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl Partition {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub statements: Partition,
    /// Present only when the lake carries table-table labels.
    pub tables: Option<Partition>,
}

/// Deterministic per-modality partition of statement ids (and table ids
/// when table-table labels exist).
pub fn split(lake: &DataLake, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let stmt_ids: Vec<&str> = lake.statements.iter().map(|s| s.id.as_str()).collect();
    let statements = partition_ids(&stmt_ids, spec, spec.seed)?;
    let tables = if lake.table_table_labels.is_some() {
        let table_ids: Vec<&str> = lake.tables.iter().map(|t| t.id.as_str()).collect();
        Some(partition_ids(&table_ids, spec, spec.seed.wrapping_add(1))?)
    } else {
        None
    };
    Ok(Split { statements, tables })
}

fn partition_ids(ids: &[&str], spec: &SplitSpec, seed: u64) -> Result<Partition> {
    let n = ids.len();
    let n_train = (spec.train_frac * n as f64).round() as usize;
    let n_val = (spec.val_frac * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Validation(format!(
            "{n} ids cannot be split into nonempty train/val/test at ({}, {}, {})",
            spec.train_frac, spec.val_frac, spec.test_frac
        )));
    }
    let mut shuffled: Vec<&str> = ids.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let owned = |s: &[&str]| s.iter().map(|x| (*x).to_owned()).collect::<BTreeSet<_>>();
    Ok(Partition {
        train: owned(&shuffled[..n_train]),
        val: owned(&shuffled[n_train..n_train + n_val]),
        test: owned(&shuffled[n_train + n_val..]),
    })
}
