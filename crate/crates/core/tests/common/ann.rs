use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use lakescope::annindex::{AnnIndex, IndexOptions};
use lakescope::tensor::Matrix;

pub const RECALL_DIM: usize = 5;
pub const RECALL_N: usize = 5000;
pub const RECALL_K: usize = 10;
pub const RECALL_QUERIES: usize = 200;

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i:05}")).collect()
}

pub fn gaussian(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, dim, data)
}

/// Cosine top-k in plain f64, ties by ascending id.
pub fn oracle_top_k(ids: &[String], vectors: &Matrix, q: &[f64], k: usize) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut scored: Vec<(f64, &String)> = (0..vectors.rows())
        .map(|i| {
            let v = vectors.row(i);
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            (d / (norm(v) * qn), &ids[i])
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(s, id)| (id.clone(), s)).collect()
}

/// Corpora up to the exact-mode threshold; returns a description of the
/// first disagreement with the oracle, if any.
pub fn exact_mode_disagreement() -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for &(n, dim) in &[(1, 3), (2, 2), (17, 4), (100, 8), (500, 16), (1000, 32)] {
        let vectors = gaussian(n, dim, &mut rng);
        let ids = ids(n);
        let index = AnnIndex::build(ids.clone(), &vectors, IndexOptions::default()).ok()?;
        if !index.is_exact() {
            return Some(format!("corpus of {n} is not in exact mode"));
        }
        let queries = gaussian(20, dim, &mut rng);
        for qi in 0..queries.rows() {
            let q = queries.row(qi);
            for k in [1, 10, n + 5] {
                let got = index.query(q, k, 1).ok()?;
                let want = oracle_top_k(&ids, &vectors, q, k);
                let same_ids = got.iter().map(|g| &g.0).eq(want.iter().map(|w| &w.0));
                let close = got.iter().zip(&want).all(|(g, w)| (g.1 - w.1).abs() < 1e-6);
                if !same_ids || !close {
                    return Some(format!("n={n} dim={dim} query {qi} k={k}"));
                }
            }
        }
    }
    None
}

/// Mean recall@10 at breadth 10k over random queries, one value per seed.
pub fn approximate_recall(seeds: &[u64]) -> Vec<f64> {
    seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vectors = gaussian(RECALL_N, RECALL_DIM, &mut rng);
            let ids = ids(RECALL_N);
            let options = IndexOptions {
                seed,
                ..Default::default()
            };
            let index = AnnIndex::build(ids.clone(), &vectors, options).unwrap();
            assert!(!index.is_exact());
            let queries = gaussian(RECALL_QUERIES, RECALL_DIM, &mut rng);
            let mut hits = 0usize;
            for qi in 0..queries.rows() {
                let q = queries.row(qi);
                let got = index.query(q, RECALL_K, 10 * RECALL_K).unwrap();
                let want = oracle_top_k(&ids, &vectors, q, RECALL_K);
                hits += got.iter().filter(|g| want.iter().any(|w| w.0 == g.0)).count();
            }
            hits as f64 / (RECALL_K * RECALL_QUERIES) as f64
        })
        .collect()
}

/// Saves and reloads an approximate index and reruns 100 probes; returns
/// whether every result list is identical.
pub fn round_trip_identical(dir: &std::path::Path) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vectors = gaussian(3000, 8, &mut rng);
    let index = AnnIndex::build(ids(3000), &vectors, IndexOptions::default()).unwrap();
    let path = dir.join("index.bin");
    index.save(&path).unwrap();
    let loaded = AnnIndex::load(&path).unwrap();
    let probes = gaussian(100, 8, &mut rng);
    (0..probes.rows()).all(|i| {
        let q = probes.row(i);
        index.query(q, 10, 100).unwrap() == loaded.query(q, 10, 100).unwrap()
    }) && loaded == index
}
