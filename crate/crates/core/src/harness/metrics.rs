//! Binary and ranked retrieval metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query id -> set of table ids.
pub type TableSets = BTreeMap<String, BTreeSet<String>>;

/// Precision, recall and F1 from confusion counts. Each is 0 when its
/// denominator is 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    (p, r, f1(p, r))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// pooled (query, table) decisions
    Micro,
    /// mean of per-query scores
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub averaging: Averaging,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_queries: usize,
}

fn gold_for<'a>(gold: &'a TableSets, q: &str) -> Result<&'a BTreeSet<String>> {
    gold.get(q)
        .ok_or_else(|| Error::Validation(format!("query {q} has no gold entry")))
}

/// Every query in `predicted` must have a gold entry (possibly empty).
pub fn compute_binary_metrics(predicted: &TableSets, gold: &TableSets, averaging: Averaging) -> Result<BinaryMetrics> {
    let mut counts = Vec::with_capacity(predicted.len());
    for (q, pred) in predicted {
        let g = gold_for(gold, q)?;
        let tp = pred.intersection(g).count();
        counts.push((tp, pred.len() - tp, g.len() - tp));
    }
    let (precision, recall, f) = match averaging {
        Averaging::Micro => {
            let (tp, fp, fn_) = counts
                .iter()
                .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
            prf(tp, fp, fn_)
        }
        Averaging::Macro => {
            let n = counts.len().max(1) as f64;
            let per: Vec<_> = counts.iter().map(|&(tp, fp, fn_)| prf(tp, fp, fn_)).collect();
            (
                per.iter().map(|x| x.0).sum::<f64>() / n,
                per.iter().map(|x| x.1).sum::<f64>() / n,
                per.iter().map(|x| x.2).sum::<f64>() / n,
            )
        }
    };
    Ok(BinaryMetrics {
        averaging,
        precision,
        recall,
        f1: f,
        n_queries: counts.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAtK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    /// queries with a nonempty gold set
    pub n_queries: usize,
}

/// P@k and R@k averaged over queries whose gold set is nonempty. Lists
/// shorter than `k` count as retrieving nothing further.
pub fn compute_ranked_metrics(
    ranked: &BTreeMap<String, Vec<String>>,
    gold: &TableSets,
    ks: &[usize],
) -> Result<Vec<RankedAtK>> {
    if ks.contains(&0) {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut scored = Vec::new();
    for (q, list) in ranked {
        let g = gold_for(gold, q)?;
        if !g.is_empty() {
            scored.push((list, g));
        }
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let n = scored.len();
            let (mut p, mut r) = (0.0, 0.0);
            for (list, g) in &scored {
                let hits = list.iter().take(k).filter(|t| g.contains(*t)).count() as f64;
                p += hits / k as f64;
                r += hits / g.len() as f64;
            }
            let avg = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
            RankedAtK {
                k,
                precision: avg(p),
                recall: avg(r),
                n_queries: n,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(pairs: &[(&str, &[&str])]) -> TableSets {
        pairs
            .iter()
            .map(|(q, ts)| (q.to_string(), ts.iter().map(|t| t.to_string()).collect()))
            .collect()
    }

    #[test]
    fn perfect_and_half_precision() {
        let g = sets(&[("q1", &["a", "b"]), ("q2", &[])]);
        let m = compute_binary_metrics(&g, &g, Averaging::Micro).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let pred = sets(&[("q1", &["a", "b", "c", "d"])]);
        let m = compute_binary_metrics(&pred, &g, Averaging::Micro).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(compute_binary_metrics(&sets(&[("zz", &[])]), &g, Averaging::Micro).is_err());
    }

    #[test]
    fn ranked_cases() {
        let gold = sets(&[("q", &["t1"]), ("empty", &[])]);
        let ranked: BTreeMap<String, Vec<String>> = [
            ("q".to_string(), vec!["t1".to_string(), "t9".to_string()]),
            ("empty".to_string(), vec!["t1".to_string()]),
        ]
        .into();
        let r = compute_ranked_metrics(&ranked, &gold, &[2]).unwrap();
        assert_eq!((r[0].precision, r[0].recall, r[0].n_queries), (0.5, 1.0, 1));
    }
}
