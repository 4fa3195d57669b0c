//! Angular nearest-neighbor index: a forest of random-hyperplane trees with
//! a brute-force mode for small collections.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storage;
use crate::tensor::{dot, Matrix};

/// Collections up to this size are always searched exhaustively.
pub const EXACT_THRESHOLD: usize = 1000;

const INDEX_MAGIC: &[u8; 8] = b"LKSANNI\0";
const INDEX_VERSION: u32 = 1;
const SPLIT_ATTEMPTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexOptions {
    pub n_trees: usize,
    pub leaf_capacity: usize,
    pub seed: u64,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            n_trees: 10,
            leaf_capacity: 16,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    /// Points with `normal . x > offset` go right.
    Split {
        normal: Vec<f64>,
        offset: f64,
        left: u32,
        right: u32,
    },
    Leaf(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
struct Tree {
    /// root is node 0
    nodes: Vec<Node>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnIndex {
    ids: Vec<String>,
    vectors: Matrix,
    trees: Vec<Tree>,
    options: IndexOptions,
    exact: bool,
}

fn normalize_f32(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter()
        .map(|x| if n > 0.0 { (x / n) as f32 as f64 } else { 0.0 })
        .collect()
}

impl AnnIndex {
    /// Builds the forest over `vectors` (one row per id). Rows are
    /// normalized and held at single precision.
    pub fn build(ids: Vec<String>, vectors: &Matrix, options: IndexOptions) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty collection".into()));
        }
        if ids.len() != vectors.rows() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                actual: vectors.rows(),
            });
        }
        if options.n_trees == 0 || options.leaf_capacity == 0 {
            return Err(Error::InvalidArgument("n_trees and leaf_capacity must be positive".into()));
        }
        let dim = vectors.cols();
        let data: Vec<f64> = (0..vectors.rows()).flat_map(|r| normalize_f32(vectors.row(r))).collect();
        let vectors = Matrix::from_vec(ids.len(), dim, data);
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let all: Vec<u32> = (0..ids.len() as u32).collect();
        let trees = (0..options.n_trees)
            .map(|_| {
                let mut nodes = Vec::new();
                build_node(&vectors, all.clone(), options.leaf_capacity, &mut rng, &mut nodes);
                Tree { nodes }
            })
            .collect();
        Ok(Self {
            exact: ids.len() <= EXACT_THRESHOLD,
            ids,
            vectors,
            trees,
            options,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn options(&self) -> IndexOptions {
        self.options
    }

    /// Largest leaf over all trees.
    pub fn max_leaf_size(&self) -> usize {
        self.trees
            .iter()
            .flat_map(|t| &t.nodes)
            .filter_map(|n| match n {
                Node::Leaf(items) => Some(items.len()),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Top `k` ids by cosine to `query`, scores descending and ties broken
    /// by ascending id. Approximate mode gathers at least `search_breadth`
    /// distinct candidates from the forest before exact re-scoring.
    pub fn query(&self, query: &[f64], k: usize, search_breadth: usize) -> Result<Vec<(String, f64)>> {
        Ok(self
            .search(query, k, search_breadth)?
            .into_iter()
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }

    /// As [`AnnIndex::query`], returning positions instead of ids.
    pub fn search(&self, query: &[f64], k: usize, search_breadth: usize) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let q = {
            let n = dot(query, query).sqrt();
            if n > 0.0 {
                query.iter().map(|x| x / n).collect()
            } else {
                vec![0.0; query.len()]
            }
        };
        let candidates: Vec<u32> = if self.exact {
            (0..self.len() as u32).collect()
        } else {
            self.gather(&q, search_breadth.max(k))
        };
        let mut scored: Vec<(f64, u32)> = candidates
            .into_iter()
            .map(|i| (dot(&q, self.vectors.row(i as usize)), i))
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.ids[a.1 as usize].cmp(&self.ids[b.1 as usize]))
        });
        scored.truncate(k);
        Ok(scored.into_iter().map(|(s, i)| (i as usize, s)).collect())
    }

    /// Stored unit vector at position `i`.
    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// Best-first descent over all trees until `want` distinct items are seen.
    fn gather(&self, q: &[f64], want: usize) -> Vec<u32> {
        let mut heap = BinaryHeap::new();
        for t in 0..self.trees.len() {
            heap.push(Frontier {
                priority: f64::INFINITY,
                tree: t,
                node: 0,
            });
        }
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        while let Some(f) = heap.pop() {
            if out.len() >= want {
                break;
            }
            match &self.trees[f.tree].nodes[f.node as usize] {
                Node::Leaf(items) => {
                    for &i in items {
                        if seen.insert(i) {
                            out.push(i);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let margin = dot(normal, q) - offset;
                    heap.push(Frontier {
                        priority: f.priority.min(margin),
                        tree: f.tree,
                        node: *right,
                    });
                    heap.push(Frontier {
                        priority: f.priority.min(-margin),
                        tree: f.tree,
                        node: *left,
                    });
                }
            }
        }
        out
    }

    /// CRC of the serialized form; unchanged by queries.
    pub fn content_hash(&self) -> Result<u32> {
        Ok(crc32fast::hash(&self.to_bytes()?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        storage::push_f32s(&mut payload, self.vectors.data());
        for tree in &self.trees {
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        normal,
                        offset,
                        left,
                        right,
                    } => {
                        storage::push_u32s(&mut payload, [0]);
                        storage::push_f32s(&mut payload, normal);
                        storage::push_f32s(&mut payload, &[*offset]);
                        storage::push_u32s(&mut payload, [*left, *right]);
                    }
                    Node::Leaf(items) => {
                        storage::push_u32s(&mut payload, [1, items.len() as u32]);
                        storage::push_u32s(&mut payload, items.iter().copied());
                    }
                }
            }
        }
        let manifest = IndexManifest {
            dim: self.dim(),
            count: self.len(),
            n_trees: self.options.n_trees,
            leaf_capacity: self.options.leaf_capacity,
            seed: self.options.seed,
            exact: self.exact,
            ids: self.ids.clone(),
            tree_sizes: self.trees.iter().map(|t| t.nodes.len()).collect(),
        };
        storage::encode(INDEX_MAGIC, INDEX_VERSION, &manifest, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, payload): (IndexManifest, _) = storage::decode(INDEX_MAGIC, INDEX_VERSION, bytes)?;
        if m.ids.len() != m.count || m.tree_sizes.len() != m.n_trees {
            return Err(Error::Format("index manifest counts disagree".into()));
        }
        let mut c = storage::Cursor::new(&payload);
        let vectors = Matrix::from_vec(m.count, m.dim, c.f32s(m.count * m.dim)?);
        let mut trees = Vec::with_capacity(m.n_trees);
        for &size in &m.tree_sizes {
            let mut nodes = Vec::with_capacity(size);
            for _ in 0..size {
                let tag = c.u32s(1)?[0];
                nodes.push(match tag {
                    0 => {
                        let normal = c.f32s(m.dim)?;
                        let offset = c.f32s(1)?[0];
                        let lr = c.u32s(2)?;
                        if lr.iter().any(|&x| x as usize >= size) {
                            return Err(Error::Format("child offset out of range".into()));
                        }
                        Node::Split {
                            normal,
                            offset,
                            left: lr[0],
                            right: lr[1],
                        }
                    }
                    1 => {
                        let n = c.u32s(1)?[0] as usize;
                        let items = c.u32s(n)?;
                        if items.iter().any(|&i| i as usize >= m.count) {
                            return Err(Error::Format("leaf item out of range".into()));
                        }
                        Node::Leaf(items)
                    }
                    other => return Err(Error::Format(format!("unknown node tag {other}"))),
                });
            }
            trees.push(Tree { nodes });
        }
        c.finish()?;
        Ok(Self {
            ids: m.ids,
            vectors,
            trees,
            options: IndexOptions {
                n_trees: m.n_trees,
                leaf_capacity: m.leaf_capacity,
                seed: m.seed,
            },
            exact: m.exact,
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

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    dim: usize,
    count: usize,
    n_trees: usize,
    leaf_capacity: usize,
    seed: u64,
    exact: bool,
    ids: Vec<String>,
    tree_sizes: Vec<usize>,
}

struct Frontier {
    priority: f64,
    tree: usize,
    node: u32,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Appends the subtree over `items` to `nodes` and returns its index.
fn build_node(vectors: &Matrix, items: Vec<u32>, cap: usize, rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>) -> u32 {
    let me = nodes.len() as u32;
    if items.len() <= cap {
        nodes.push(Node::Leaf(items));
        return me;
    }
    nodes.push(Node::Leaf(Vec::new()));
    let mut chosen = None;
    for _ in 0..SPLIT_ATTEMPTS {
        let a = items[rng.gen_range(0..items.len())] as usize;
        let b = items[rng.gen_range(0..items.len())] as usize;
        let (p, q) = (vectors.row(a), vectors.row(b));
        let diff: Vec<f64> = p.iter().zip(q).map(|(x, y)| x - y).collect();
        if diff.iter().all(|&x| x == 0.0) {
            continue;
        }
        // unit normal so margins are true distances to the hyperplane
        let normal = normalize_f32(&diff);
        let mid: Vec<f64> = p.iter().zip(q).map(|(x, y)| (x + y) / 2.0).collect();
        let offset = dot(&normal, &mid) as f32 as f64;
        let (right, left): (Vec<u32>, Vec<u32>) = items
            .iter()
            .partition(|&&i| dot(&normal, vectors.row(i as usize)) > offset);
        if !left.is_empty() && !right.is_empty() {
            chosen = Some((normal, offset, left, right));
            break;
        }
    }
    let (normal, offset, left, right) = chosen.unwrap_or_else(|| {
        // duplicates or a degenerate sample: split at random, searched on both sides
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &i in &items {
            if rng.gen_bool(0.5) {
                right.push(i)
            } else {
                left.push(i)
            }
        }
        if left.is_empty() {
            left.push(right.pop().expect("nonempty"));
        } else if right.is_empty() {
            right.push(left.pop().expect("nonempty"));
        }
        (vec![0.0; vectors.cols()], 0.0, left, right)
    });
    let l = build_node(vectors, left, cap, rng, nodes);
    let r = build_node(vectors, right, cap, rng, nodes);
    nodes[me as usize] = Node::Split {
        normal,
        offset,
        left: l,
        right: r,
    };
    me
}

/// Exhaustive cosine top-k with the same ordering rules as the index.
pub fn brute_force_top_k(ids: &[String], vectors: &Matrix, query: &[f64], k: usize) -> Vec<(String, f64)> {
    let q = normalize_f32(query);
    let mut scored: Vec<(f64, usize)> = (0..vectors.rows())
        .map(|i| (dot(&q, &normalize_f32(vectors.row(i))), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| ids[a.1].cmp(&ids[b.1])));
    scored.into_iter().take(k).map(|(s, i)| (ids[i].clone(), s)).collect()
}
