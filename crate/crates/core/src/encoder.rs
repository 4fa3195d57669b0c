//! Node content features and the two content encoders (summed linear
//! projection, Bi-LSTM averaged over content elements).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::Hasher;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::corpus::{DataLake, NlStatement, Table};
use crate::error::{Error, Result};
use crate::graphgen::NodeKind;
use crate::tensor::Matrix;
use crate::text::tokenize;

/// Cells per column that contribute to the column's text.
pub const CELL_SAMPLE_CAP: usize = 20;

pub trait TextFeaturizer: Send + Sync {
    fn dim(&self) -> usize;

    /// Feature vector for one content element. `key` is `<id>`,
    /// `<id>#caption` or `<id>#col<j>`.
    fn featurize(&self, key: &str, text: &str) -> Vec<f64>;
}

/// Signed feature hashing of the token bag, L2-normalized.
#[derive(Clone, Debug)]
pub struct HashingFeaturizer {
    dim: usize,
    seed: u64,
}

impl HashingFeaturizer {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "featurizer dimension must be positive");
        Self { dim, seed }
    }
}

impl TextFeaturizer for HashingFeaturizer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn featurize(&self, _key: &str, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in tokenize(text) {
            let mut h = FnvHasher::default();
            h.write_u64(self.seed);
            h.write(tok.as_bytes());
            let x = h.finish();
            let sign = if x >> 63 == 1 { -1.0 } else { 1.0 };
            v[(x % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

#[derive(Deserialize)]
struct LookupRecord {
    key: String,
    vector: Vec<f64>,
}

/// Precomputed vectors keyed by content-element key. Misses fall back to the
/// hashing featurizer when one is configured, otherwise to the zero vector.
pub struct LookupFeaturizer {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    fallback: Option<HashingFeaturizer>,
}

impl LookupFeaturizer {
    pub fn new(vectors: HashMap<String, Vec<f64>>, fallback_seed: Option<u64>) -> Result<Self> {
        let dim = vectors
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::Validation("embedding lookup is empty".into()))?;
        for (k, v) in &vectors {
            if v.len() != dim {
                return Err(Error::Validation(format!("vector for {k} has dimension {}, expected {dim}", v.len())));
            }
        }
        Ok(Self {
            dim,
            vectors,
            fallback: fallback_seed.map(|s| HashingFeaturizer::new(dim, s)),
        })
    }

    /// Reads JSON lines `{"key": ..., "vector": [...]}`.
    pub fn load(path: &Path, fallback_seed: Option<u64>) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut vectors = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LookupRecord = serde_json::from_str(&line).map_err(|e| Error::Ingest {
                file: path.to_path_buf(),
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
            vectors.insert(rec.key, rec.vector);
        }
        Self::new(vectors, fallback_seed)
    }
}

impl TextFeaturizer for LookupFeaturizer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn featurize(&self, key: &str, text: &str) -> Vec<f64> {
        if let Some(v) = self.vectors.get(key) {
            return v.clone();
        }
        match &self.fallback {
            Some(f) => f.featurize(key, text),
            None => {
                log::warn!("no precomputed vector for {key}; using zeros");
                vec![0.0; self.dim]
            }
        }
    }
}

/// Raw feature vectors of one node, in content order.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentSet {
    pub node_id: String,
    pub kind: NodeKind,
    pub elements: Vec<Vec<f64>>,
}

impl ContentSet {
    pub fn dim(&self) -> usize {
        self.elements[0].len()
    }
}

pub fn extract_statement_content(s: &NlStatement, featurizer: &dyn TextFeaturizer) -> ContentSet {
    ContentSet {
        node_id: s.id.clone(),
        kind: NodeKind::Statement,
        elements: vec![featurizer.featurize(&s.id, &s.text)],
    }
}

/// Caption element first (when present), then one element per column made
/// of the header and the first [`CELL_SAMPLE_CAP`] cell values.
pub fn extract_table_content(t: &Table, featurizer: &dyn TextFeaturizer) -> ContentSet {
    let mut elements = Vec::with_capacity(t.columns.len() + 1);
    if let Some(c) = &t.caption {
        elements.push(featurizer.featurize(&format!("{}#caption", t.id), c));
    }
    for (j, col) in t.columns.iter().enumerate() {
        let mut parts: Vec<&str> = Vec::new();
        if let Some(h) = &col.header {
            parts.push(h);
        }
        parts.extend(col.values.iter().take(CELL_SAMPLE_CAP).map(String::as_str));
        elements.push(featurizer.featurize(&format!("{}#col{j}", t.id), &parts.join(" ")));
    }
    if elements.is_empty() {
        elements.push(vec![0.0; featurizer.dim()]);
    }
    ContentSet {
        node_id: t.id.clone(),
        kind: NodeKind::Table,
        elements,
    }
}

/// Content sets of every node of `lake`: statements first, then tables.
pub fn extract_all(lake: &DataLake, featurizer: &dyn TextFeaturizer) -> Vec<ContentSet> {
    lake.statements
        .iter()
        .map(|s| extract_statement_content(s, featurizer))
        .chain(lake.tables.iter().map(|t| extract_table_content(t, featurizer)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Linear,
    Bilstm,
}

/// Standard LSTM cell; gate blocks of width `h` in order input, forget,
/// candidate, output. Inputs are row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<T = Matrix> {
    /// `d_c x 4h`
    pub w_input: T,
    /// `h x 4h`
    pub w_hidden: T,
    /// `1 x 4h`
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderParams<T = Matrix> {
    /// Per-type projections stored as `d_c x d` (row-vector convention).
    Linear { statement: T, table: T },
    /// One bidirectional LSTM shared by both node types, hidden `d/2` each way.
    BiLstm { forward: LstmCell<T>, backward: LstmCell<T> },
}

impl<T> LstmCell<T> {
    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LstmCell<U> {
        LstmCell {
            w_input: f(&format!("{prefix}.w_input"), &self.w_input),
            w_hidden: f(&format!("{prefix}.w_hidden"), &self.w_hidden),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<T> EncoderParams<T> {
    pub fn mode(&self) -> EncoderMode {
        match self {
            EncoderParams::Linear { .. } => EncoderMode::Linear,
            EncoderParams::BiLstm { .. } => EncoderMode::Bilstm,
        }
    }

    /// Applies `f` to every tensor with its qualified name.
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> EncoderParams<U> {
        match self {
            EncoderParams::Linear { statement, table } => EncoderParams::Linear {
                statement: f(&format!("{prefix}.statement"), statement),
                table: f(&format!("{prefix}.table"), table),
            },
            EncoderParams::BiLstm { forward, backward } => EncoderParams::BiLstm {
                forward: forward.map(&format!("{prefix}.forward"), f),
                backward: backward.map(&format!("{prefix}.backward"), f),
            },
        }
    }
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(mode: EncoderMode, d_c: usize, d: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        match mode {
            EncoderMode::Linear => Ok(EncoderParams::Linear {
                statement: Matrix::uniform(d_c, d, bound, rng),
                table: Matrix::uniform(d_c, d, bound, rng),
            }),
            EncoderMode::Bilstm => {
                if d % 2 != 0 {
                    return Err(Error::InvalidArgument(format!("Bi-LSTM needs an even output dimension, got {d}")));
                }
                let h = d / 2;
                let cell = |rng: &mut R| LstmCell {
                    w_input: Matrix::uniform(d_c, 4 * h, bound, rng),
                    w_hidden: Matrix::uniform(h, 4 * h, bound, rng),
                    bias: Matrix::uniform(1, 4 * h, bound, rng),
                };
                let forward = cell(rng);
                let backward = cell(rng);
                Ok(EncoderParams::BiLstm { forward, backward })
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EncoderParams::Linear { statement, .. } => statement.rows(),
            EncoderParams::BiLstm { forward, .. } => forward.w_input.rows(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EncoderParams::Linear { statement, .. } => statement.cols(),
            EncoderParams::BiLstm { forward, backward } => forward.w_hidden.rows() + backward.w_hidden.rows(),
        }
    }
}

fn check_dims(cs: &ContentSet, d_c: usize) -> Result<()> {
    if cs.elements.is_empty() {
        return Err(Error::Validation(format!("content set of {} is empty", cs.node_id)));
    }
    for e in &cs.elements {
        if e.len() != d_c {
            return Err(Error::DimensionMismatch {
                expected: d_c,
                actual: e.len(),
            });
        }
    }
    Ok(())
}

/// `sum_i W_a x_i` with the projection of the node's type.
pub fn encode_linear(cs: &ContentSet, params: &EncoderParams) -> Result<Vec<f64>> {
    let EncoderParams::Linear { statement, table } = params else {
        return Err(Error::InvalidArgument("encoder is not in linear mode".into()));
    };
    check_dims(cs, statement.rows())?;
    let w = match cs.kind {
        NodeKind::Statement => statement,
        NodeKind::Table => table,
    };
    let mut sum = vec![0.0; w.rows()];
    for e in &cs.elements {
        for (s, x) in sum.iter_mut().zip(e) {
            *s += x;
        }
    }
    Ok(Matrix::row_vector(&sum).matmul(w).into_data())
}

/// Mean over positions of the concatenated forward and backward hidden states.
pub fn encode_bilstm(cs: &ContentSet, params: &EncoderParams) -> Result<Vec<f64>> {
    let prepared = PreparedContent::new(std::slice::from_ref(cs), params.input_dim())?;
    let mut tape = Tape::new();
    let vars = params.map("", &mut |_, m| tape.leaf(m.clone()));
    if vars.mode() != EncoderMode::Bilstm {
        return Err(Error::InvalidArgument("encoder is not in Bi-LSTM mode".into()));
    }
    let out = prepared.encode(&mut tape, &vars);
    Ok(tape.value(out).data().to_vec())
}

/// Dispatches on the parameter mode.
pub fn encode(cs: &ContentSet, params: &EncoderParams) -> Result<Vec<f64>> {
    match params.mode() {
        EncoderMode::Linear => encode_linear(cs, params),
        EncoderMode::Bilstm => encode_bilstm(cs, params),
    }
}

/// Content sets laid out for batched encoding on a tape. Row `i` of the
/// encoder output corresponds to `contents[i]`.
#[derive(Clone, Debug)]
pub struct PreparedContent {
    n: usize,
    /// Summed features of statement rows and table rows, with their row indices.
    sums: [(Arc<Vec<usize>>, Matrix); 2],
    /// Nodes grouped by sequence length; `steps[t]` stacks element `t`.
    groups: Vec<SequenceGroup>,
}

#[derive(Clone, Debug)]
struct SequenceGroup {
    rows: Vec<usize>,
    steps: Vec<Matrix>,
}

impl PreparedContent {
    pub fn new(contents: &[ContentSet], d_c: usize) -> Result<Self> {
        for cs in contents {
            check_dims(cs, d_c)?;
        }
        let mut sums: [(Vec<usize>, Vec<f64>); 2] = Default::default();
        for (i, cs) in contents.iter().enumerate() {
            let slot = match cs.kind {
                NodeKind::Statement => 0,
                NodeKind::Table => 1,
            };
            sums[slot].0.push(i);
            let mut s = vec![0.0; d_c];
            for e in &cs.elements {
                for (a, x) in s.iter_mut().zip(e) {
                    *a += x;
                }
            }
            sums[slot].1.extend(s);
        }
        let sums = sums.map(|(rows, data)| {
            let n = rows.len();
            (Arc::new(rows), Matrix::from_vec(n, d_c, data))
        });
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, cs) in contents.iter().enumerate() {
            by_len.entry(cs.elements.len()).or_default().push(i);
        }
        let groups = by_len
            .into_iter()
            .map(|(len, rows)| {
                let steps = (0..len)
                    .map(|t| {
                        let data: Vec<f64> = rows.iter().flat_map(|&r| contents[r].elements[t].iter().copied()).collect();
                        Matrix::from_vec(rows.len(), d_c, data)
                    })
                    .collect();
                SequenceGroup { rows, steps }
            })
            .collect();
        Ok(Self {
            n: contents.len(),
            sums,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Encoder output for all rows, `n x d`.
    pub fn encode(&self, tape: &mut Tape, params: &EncoderParams<Var>) -> Var {
        let mut parts = Vec::new();
        let mut order: Vec<usize> = Vec::with_capacity(self.n);
        match params {
            EncoderParams::Linear { statement, table } => {
                for ((rows, sum), w) in self.sums.iter().zip([statement, table]) {
                    if rows.is_empty() {
                        continue;
                    }
                    let x = tape.leaf(sum.clone());
                    parts.push(tape.matmul(x, *w));
                    order.extend(rows.iter());
                }
            }
            EncoderParams::BiLstm { forward, backward } => {
                for g in &self.groups {
                    let len = g.steps.len();
                    let xs: Vec<Var> = g.steps.iter().map(|m| tape.leaf(m.clone())).collect();
                    let fwd = run_lstm(tape, forward, &xs);
                    let rev: Vec<Var> = xs.iter().rev().copied().collect();
                    let bwd = run_lstm(tape, backward, &rev);
                    let mut acc: Option<Var> = None;
                    for t in 0..len {
                        // backward state at position t was produced at reverse step len-1-t
                        let cat = tape.concat_cols(&[fwd[t], bwd[len - 1 - t]]);
                        acc = Some(match acc {
                            None => cat,
                            Some(a) => tape.add(a, cat),
                        });
                    }
                    let mean = tape.scale(acc.expect("nonempty sequence"), 1.0 / len as f64);
                    parts.push(mean);
                    order.extend(g.rows.iter());
                }
            }
        }
        let stacked = tape.concat_rows(&parts);
        let mut inverse = vec![0; self.n];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        if inverse.iter().enumerate().all(|(i, &p)| i == p) {
            stacked
        } else {
            tape.gather_rows(stacked, Arc::new(inverse))
        }
    }
}

/// Hidden states of a zero-initialized LSTM over `xs`.
fn run_lstm(tape: &mut Tape, cell: &LstmCell<Var>, xs: &[Var]) -> Vec<Var> {
    let h_dim = tape.value(cell.w_hidden).rows();
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let mut z = tape.matmul(x, cell.w_input);
        if let Some(hp) = h {
            let r = tape.matmul(hp, cell.w_hidden);
            z = tape.add(z, r);
        }
        z = tape.add_row(z, cell.bias);
        let gate = |tape: &mut Tape, k: usize, f: Activation| {
            let s = tape.slice_cols(z, k * h_dim, h_dim);
            tape.act(s, f)
        };
        let i = gate(tape, 0, Activation::Sigmoid);
        let f = gate(tape, 1, Activation::Sigmoid);
        let g = gate(tape, 2, Activation::Tanh);
        let o = gate(tape, 3, Activation::Sigmoid);
        let ig = tape.mul(i, g);
        let c_new = match c {
            Some(cp) => {
                let fc = tape.mul(f, cp);
                tape.add(fc, ig)
            }
            None => ig,
        };
        let tc = tape.act(c_new, Activation::Tanh);
        let h_new = tape.mul(o, tc);
        c = Some(c_new);
        h = Some(h_new);
        out.push(h_new);
    }
    out
}
