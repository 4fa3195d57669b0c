use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use lakescope::graphgen::{bm25_score, CorpusStats};
use lakescope::harness::metrics::{compute_binary_metrics, compute_ranked_metrics, Averaging, TableSets};
use lakescope::harness::synthetic::{cluster_of, generate_synthetic_lake, SyntheticSpec};
use lakescope::text::tokenize;

const UNIVERSE: usize = 12;

fn table(i: usize) -> String {
    format!("t{i:02}")
}

fn table_sets() -> impl Strategy<Value = Vec<(BTreeSet<usize>, BTreeSet<usize>)>> {
    let set = || proptest::collection::btree_set(0..UNIVERSE, 0..6);
    proptest::collection::vec((set(), set()), 1..8)
}

fn to_maps(rows: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> (TableSets, TableSets) {
    let conv = |s: &BTreeSet<usize>| s.iter().map(|&i| table(i)).collect::<BTreeSet<_>>();
    let pred = rows.iter().enumerate().map(|(q, r)| (format!("q{q}"), conv(&r.0))).collect();
    let gold = rows.iter().enumerate().map(|(q, r)| (format!("q{q}"), conv(&r.1))).collect();
    (pred, gold)
}

/// Cell-by-cell confusion counts over the full (query, table) grid.
fn confusion(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for t in 0..UNIVERSE {
        match (pred.contains(&t), gold.contains(&t)) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn micro_metrics_match_confusion_counts(rows in table_sets()) {
        let (pred, gold) = to_maps(&rows);
        let m = compute_binary_metrics(&pred, &gold, Averaging::Micro).unwrap();
        let (tp, fp, fn_) = rows.iter().map(|r| confusion(&r.0, &r.1)).fold((0.0, 0.0, 0.0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        prop_assert!((m.precision - p).abs() < 1e-12);
        prop_assert!((m.recall - r).abs() < 1e-12);
        prop_assert!((m.f1 - harmonic(p, r)).abs() < 1e-12);
        prop_assert_eq!(m.n_queries, rows.len());
    }

    #[test]
    fn macro_metrics_average_per_query_scores(rows in table_sets()) {
        let (pred, gold) = to_maps(&rows);
        let m = compute_binary_metrics(&pred, &gold, Averaging::Macro).unwrap();
        let per: Vec<(f64, f64, f64)> = rows
            .iter()
            .map(|r| {
                let (tp, fp, fn_) = confusion(&r.0, &r.1);
                let (p, rc) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
                (p, rc, harmonic(p, rc))
            })
            .collect();
        let n = per.len() as f64;
        prop_assert!((m.precision - per.iter().map(|x| x.0).sum::<f64>() / n).abs() < 1e-12);
        prop_assert!((m.recall - per.iter().map(|x| x.1).sum::<f64>() / n).abs() < 1e-12);
        prop_assert!((m.f1 - per.iter().map(|x| x.2).sum::<f64>() / n).abs() < 1e-12);
    }

    #[test]
    fn ranked_metrics_match_set_intersections(
        rows in proptest::collection::vec(
            (
                (Just((0..UNIVERSE).collect::<Vec<usize>>()).prop_shuffle(), 0..=UNIVERSE)
                    .prop_map(|(order, n)| order[..n].to_vec()),
                proptest::collection::btree_set(0..UNIVERSE, 0..6),
            ),
            1..8,
        ),
        ks in proptest::collection::vec(1usize..15, 1..4),
    ) {
        let ranked: BTreeMap<String, Vec<String>> = rows
            .iter()
            .enumerate()
            .map(|(q, r)| (format!("q{q}"), r.0.iter().map(|&i| table(i)).collect()))
            .collect();
        let gold: TableSets = rows
            .iter()
            .enumerate()
            .map(|(q, r)| (format!("q{q}"), r.1.iter().map(|&i| table(i)).collect()))
            .collect();
        let got = compute_ranked_metrics(&ranked, &gold, &ks).unwrap();
        let scored: Vec<_> = rows.iter().filter(|r| !r.1.is_empty()).collect();
        for (row, &k) in got.iter().zip(&ks) {
            prop_assert_eq!(row.k, k);
            prop_assert_eq!(row.n_queries, scored.len());
            let (mut p, mut r) = (0.0, 0.0);
            for (list, g) in &scored {
                let top: BTreeSet<usize> = list.iter().take(k).copied().collect();
                let hits = top.intersection(g).count() as f64;
                p += hits / k as f64;
                r += hits / g.len() as f64;
            }
            let n = scored.len().max(1) as f64;
            prop_assert!((row.precision - p / n).abs() < 1e-12);
            prop_assert!((row.recall - r / n).abs() < 1e-12);
        }
    }
}

#[test]
fn perfect_and_empty_predictions() {
    let gold: TableSets = [("q".to_string(), ["a", "b"].iter().map(|s| s.to_string()).collect())].into();
    let m = compute_binary_metrics(&gold, &gold, Averaging::Micro).unwrap();
    assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    let none: TableSets = [("q".to_string(), BTreeSet::new())].into();
    let m = compute_binary_metrics(&none, &gold, Averaging::Micro).unwrap();
    assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    let unknown: TableSets = [("other".to_string(), BTreeSet::new())].into();
    assert!(compute_binary_metrics(&unknown, &gold, Averaging::Micro).is_err());
    assert!(compute_ranked_metrics(&BTreeMap::new(), &gold, &[0]).is_err());
}

#[test]
fn noiseless_statements_find_their_own_cluster_by_bm25() {
    let spec = SyntheticSpec {
        noise_rate: 0.0,
        ..Default::default()
    };
    let lake = generate_synthetic_lake(&spec).unwrap();
    let docs: Vec<Vec<String>> = lake.statements.iter().map(|s| tokenize(&s.text)).collect();
    let stats = CorpusStats::from_docs(&docs);
    let mut same = 0;
    for (i, q) in docs.iter().enumerate() {
        let best = (0..docs.len())
            .filter(|&j| j != i)
            .max_by(|&a, &b| {
                let sa = bm25_score(q, &docs[a], &stats, 1.2, 0.75).unwrap();
                let sb = bm25_score(q, &docs[b], &stats, 1.2, 0.75).unwrap();
                sa.total_cmp(&sb).then(b.cmp(&a))
            })
            .unwrap();
        if cluster_of(&lake.statements[i].id) == cluster_of(&lake.statements[best].id) {
            same += 1;
        }
    }
    let rate = same as f64 / docs.len() as f64;
    assert!(rate >= 0.99, "same-cluster nearest neighbor rate {rate}");
}

#[test]
fn synthetic_lake_shape_and_labels() {
    let spec = SyntheticSpec {
        n_clusters: 3,
        tables_per_cluster: 4,
        statements_per_cluster: 6,
        seed: 9,
        ..Default::default()
    };
    let lake = generate_synthetic_lake(&spec).unwrap();
    assert_eq!(lake.tables.len(), 12);
    assert_eq!(lake.statements.len(), 18);
    for (s, t) in &lake.nl_table_labels {
        assert_eq!(cluster_of(s), cluster_of(t));
    }
    assert_eq!(lake.nl_table_labels.len(), 18 * 4);
    assert_ne!(lake, generate_synthetic_lake(&SyntheticSpec { seed: 10, ..spec }).unwrap());
}
