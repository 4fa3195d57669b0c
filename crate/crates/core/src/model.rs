//! Full parameter set and the dual-view forward pass over a graph.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::aggregation::{gcn_forward_tape, metapath_view_tape, Activations, AttentionParams, GcnParams, PathGroups};
use crate::autodiff::{Tape, Var};
use crate::encoder::{ContentSet, EncoderMode, EncoderParams, PreparedContent};
use crate::error::{Error, Result};
use crate::graphgen::{HeteroGraph, MetaPath, MetaPathNeighborhood};
use crate::objectives::MlpParams;
use crate::tensor::{Matrix, SparseMatrix};

/// Graphs above this many nodes use capped neighborhoods.
pub const FULL_NEIGHBORHOOD_LIMIT: usize = 5000;
/// Occurrence cap per neighborhood on large graphs.
pub const NEIGHBORHOOD_CAP: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Matrix> {
    pub encoder: EncoderParams<T>,
    pub attention: AttentionParams<T>,
    pub gcn: GcnParams<T>,
    pub decoder: MlpParams<T>,
}

/// Shape-defining settings of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelShape {
    pub mode: EncoderMode,
    pub d_c: usize,
    pub d: usize,
    pub gcn_depth: usize,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map("encoder", f),
            attention: self.attention.map("attention", f),
            gcn: self.gcn.map("gcn", f),
            decoder: self.decoder.map("decoder", f),
        }
    }

    /// Every tensor with its qualified name, in a fixed order.
    pub fn named(&self) -> Vec<(String, T)>
    where
        T: Clone,
    {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: EncoderParams::init(shape.mode, shape.d_c, shape.d, rng)?,
            attention: AttentionParams::init(shape.d, rng),
            gcn: GcnParams::init(shape.d, shape.gcn_depth, rng)?,
            decoder: MlpParams::init(shape.d, rng),
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            mode: self.encoder.mode(),
            d_c: self.encoder.input_dim(),
            d: self.encoder.output_dim(),
            gcn_depth: self.gcn.depth(),
        }
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |_, m| tape.leaf(m.clone()))
    }

    /// Rebuilds parameters of `shape` from named tensors.
    pub fn from_named(shape: ModelShape, tensors: &BTreeMap<String, Matrix>) -> Result<Self> {
        let template = Self::init(shape, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let mut missing = None;
        let out = template.map(&mut |name, t| match tensors.get(name) {
            Some(m) if m.shape() == t.shape() => m.clone(),
            Some(m) => {
                missing.get_or_insert(format!("tensor {name} has shape {:?}, expected {:?}", m.shape(), t.shape()));
                t.clone()
            }
            None => {
                missing.get_or_insert(format!("tensor {name} is missing"));
                t.clone()
            }
        });
        match missing {
            Some(msg) => Err(Error::Format(msg)),
            None => Ok(out),
        }
    }

    /// Values rounded to single precision, the stored precision.
    pub fn to_f32_precision(&self) -> Self {
        self.map(&mut |_, m| m.map(|x| x as f32 as f64))
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }
}

/// Everything a forward pass needs that is fixed for a given graph.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub n_statements: usize,
    pub n_nodes: usize,
    pub content: PreparedContent,
    pub paths: Vec<PathGroups>,
    pub adjacency: Arc<SparseMatrix>,
    /// node -> (path index, row within that path's targets)
    positions: Vec<Option<(usize, usize)>>,
}

impl GraphContext {
    /// `contents` lists statements then tables in graph node order.
    pub fn new(graph: &HeteroGraph, contents: &[ContentSet], d_c: usize) -> Result<Self> {
        if contents.len() != graph.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: graph.n_nodes(),
                actual: contents.len(),
            });
        }
        let cap = (graph.n_nodes() > FULL_NEIGHBORHOOD_LIMIT).then_some(NEIGHBORHOOD_CAP);
        let neighborhoods = |path: MetaPath, nodes: std::ops::Range<usize>| -> Result<Vec<MetaPathNeighborhood>> {
            nodes
                .map(|v| match cap {
                    Some(c) => graph.capped_metapath_neighbors(path, v, c),
                    None => graph.enumerate_metapath_neighbors(path, v),
                })
                .collect()
        };
        let ns = graph.n_statements();
        let mut paths = Vec::new();
        if ns > 0 {
            paths.push(PathGroups::from_neighborhoods(MetaPath::Sts, &neighborhoods(MetaPath::Sts, 0..ns)?));
        }
        if graph.n_tables() > 0 {
            paths.push(PathGroups::from_neighborhoods(
                MetaPath::Tst,
                &neighborhoods(MetaPath::Tst, ns..graph.n_nodes())?,
            ));
        }
        let mut positions = vec![None; graph.n_nodes()];
        for (pi, p) in paths.iter().enumerate() {
            for (row, &t) in p.groups.targets.iter().enumerate() {
                positions[t] = Some((pi, row));
            }
        }
        Ok(Self {
            n_statements: ns,
            n_nodes: graph.n_nodes(),
            content: PreparedContent::new(contents, d_c)?,
            paths,
            adjacency: graph.normalized_adjacency.clone(),
            positions,
        })
    }

    /// Per-path row positions of `nodes`, for scoping the path scores.
    pub fn omega_scope(&self, nodes: &[usize]) -> Vec<Option<Arc<Vec<usize>>>> {
        let mut per: Vec<Vec<usize>> = vec![Vec::new(); self.paths.len()];
        for &v in nodes {
            if let Some((p, row)) = self.positions[v] {
                per[p].push(row);
            }
        }
        per.into_iter().map(|rows| (!rows.is_empty()).then(|| Arc::new(rows))).collect()
    }

    pub fn path_kinds(&self) -> Vec<MetaPath> {
        self.paths.iter().map(|p| p.path).collect()
    }
}

/// Outputs of one forward pass.
pub struct Views {
    pub content: Var,
    pub metapath: Var,
    pub gcn: Var,
    pub beta: Var,
}

/// Both views for every node. `scope` restricts the path-score averages to
/// the given nodes (a training batch); `None` averages over all nodes.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    ctx: &GraphContext,
    scope: Option<&[usize]>,
    acts: Activations,
) -> Views {
    let content = ctx.content.encode(tape, &params.encoder);
    let omega_scope = match scope {
        Some(nodes) => ctx.omega_scope(nodes),
        None => vec![None; ctx.paths.len()],
    };
    let view = metapath_view_tape(
        tape,
        content,
        &ctx.paths,
        &params.attention,
        &omega_scope,
        ctx.n_nodes,
        acts.attention,
    );
    let gcn = gcn_forward_tape(tape, &ctx.adjacency, content, &params.gcn, acts.gcn);
    Views {
        content,
        metapath: view.h,
        gcn,
        beta: view.beta,
    }
}

/// Inference-mode meta-path embeddings and path weights (not normalized).
pub fn infer(params: &ModelParams, ctx: &GraphContext) -> (Matrix, Vec<(MetaPath, f64)>) {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let views = forward(&mut tape, &vars, ctx, None, Activations::default());
    let beta = tape.value(views.beta).data().to_vec();
    let kinds = ctx.path_kinds();
    (tape.value(views.metapath).clone(), kinds.into_iter().zip(beta).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn named_round_trip() {
        let shape = ModelShape {
            mode: EncoderMode::Bilstm,
            d_c: 6,
            d: 4,
            gcn_depth: 2,
        };
        let p = ModelParams::init(shape, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let named: BTreeMap<String, Matrix> = p.named().into_iter().collect();
        assert!(named.contains_key("encoder.forward.w_input"));
        assert!(named.contains_key("gcn.layer1"));
        assert_eq!(ModelParams::from_named(shape, &named).unwrap(), p);
        let mut broken = named.clone();
        broken.remove("decoder.b2");
        assert!(ModelParams::from_named(shape, &broken).is_err());
        assert_eq!(p.shape(), shape);
    }
}
