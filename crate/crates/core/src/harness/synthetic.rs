//! Clustered synthetic lakes with known relevance.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Column, DataLake, NlStatement, Table};
use crate::error::{Error, Result};

/// Shape of a synthetic lake. Each cluster owns a disjoint slice of the
/// vocabulary whose first word is the cluster's topic token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub tables_per_cluster: usize,
    pub statements_per_cluster: usize,
    pub vocab_size: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub columns_per_table: usize,
    pub rows_per_table: usize,
    pub tokens_per_statement: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            tables_per_cluster: 10,
            statements_per_cluster: 40,
            vocab_size: 500,
            noise_rate: 0.1,
            seed: 1,
            columns_per_table: 3,
            rows_per_table: 8,
            tokens_per_statement: 8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_clusters", self.n_clusters),
            ("tables_per_cluster", self.tables_per_cluster),
            ("statements_per_cluster", self.statements_per_cluster),
            ("columns_per_table", self.columns_per_table),
            ("rows_per_table", self.rows_per_table),
            ("tokens_per_statement", self.tokens_per_statement),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidArgument(format!("noise_rate must lie in [0, 1), got {}", self.noise_rate)));
        }
        if self.vocab_size / self.n_clusters < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary of {} words cannot give {} clusters two disjoint words each",
                self.vocab_size, self.n_clusters
            )));
        }
        Ok(())
    }

    pub fn cluster_vocab(&self, cluster: usize) -> Vec<String> {
        let per = self.vocab_size / self.n_clusters;
        (cluster * per..(cluster + 1) * per).map(|i| format!("w{i}")).collect()
    }
}

/// Ground-truth cluster of every generated statement and table id.
pub fn cluster_of(id: &str) -> Option<usize> {
    id.split('_').nth(1)?.strip_prefix('c')?.parse().ok()
}

pub fn generate_synthetic_lake(spec: &SyntheticSpec) -> Result<DataLake> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per = spec.vocab_size / spec.n_clusters;
    let global = per * spec.n_clusters;
    let mut tables = Vec::new();
    let mut statements = Vec::new();
    let mut labels = BTreeSet::new();
    for c in 0..spec.n_clusters {
        let vocab = spec.cluster_vocab(c);
        let topic = &vocab[0];
        let word = |rng: &mut ChaCha8Rng| vocab[rng.gen_range(1..per)].clone();
        let mut table_ids = Vec::new();
        for j in 0..spec.tables_per_cluster {
            let id = format!("t_c{c}_{j:03}");
            let caption = format!("{topic} {} {}", word(&mut rng), word(&mut rng));
            let columns = (0..spec.columns_per_table)
                .map(|_| Column {
                    header: Some(word(&mut rng)),
                    values: (0..spec.rows_per_table).map(|_| word(&mut rng)).collect(),
                })
                .collect();
            tables.push(Table {
                id: id.clone(),
                caption: Some(caption),
                columns,
            });
            table_ids.push(id);
        }
        for j in 0..spec.statements_per_cluster {
            let id = format!("s_c{c}_{j:03}");
            let tokens: Vec<String> = (0..spec.tokens_per_statement)
                .map(|i| {
                    let clean = if i == 0 { topic.clone() } else { word(&mut rng) };
                    if rng.gen_bool(spec.noise_rate) {
                        format!("w{}", rng.gen_range(0..global))
                    } else {
                        clean
                    }
                })
                .collect();
            statements.push(NlStatement {
                id: id.clone(),
                text: tokens.join(" "),
            });
            for t in &table_ids {
                labels.insert((id.clone(), t.clone()));
            }
        }
    }
    DataLake::new(tables, statements, labels, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    #[test]
    fn noiseless_lake_has_disjoint_clusters() {
        let spec = SyntheticSpec {
            noise_rate: 0.0,
            ..SyntheticSpec::default()
        };
        let lake = generate_synthetic_lake(&spec).unwrap();
        assert_eq!(lake.tables.len(), 50);
        assert_eq!(lake.statements.len(), 200);
        assert_eq!(lake.nl_table_labels.len(), 200 * 10);
        for s in &lake.statements {
            let st: BTreeSet<String> = tokenize(&s.text).into_iter().collect();
            for t in &lake.tables {
                let tt: BTreeSet<String> = tokenize(&t.full_text()).into_iter().collect();
                let shared = st.intersection(&tt).count();
                if cluster_of(&s.id) == cluster_of(&t.id) {
                    assert!(shared >= 1);
                } else {
                    assert_eq!(shared, 0);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic_lake(&spec).unwrap(), generate_synthetic_lake(&spec).unwrap());
        let tiny = SyntheticSpec {
            vocab_size: 5,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_lake(&tiny).is_err());
        assert_eq!(cluster_of("t_c3_007"), Some(3));
    }
}
