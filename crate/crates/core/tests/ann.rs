mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::ann::{gaussian, ids};
use lakescope::annindex::{brute_force_top_k, AnnIndex, IndexOptions};
use lakescope::tensor::Matrix;

#[test]
fn exact_mode_equals_oracle() {
    assert_eq!(common::ann::exact_mode_disagreement(), None);
}

#[test]
fn library_brute_force_agrees_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = gaussian(300, 6, &mut rng);
    let q = gaussian(1, 6, &mut rng);
    let got = brute_force_top_k(&ids(300), &v, q.row(0), 25);
    let want = common::ann::oracle_top_k(&ids(300), &v, q.row(0), 25);
    assert_eq!(got.iter().map(|g| &g.0).collect::<Vec<_>>(), want.iter().map(|w| &w.0).collect::<Vec<_>>());
}

#[test]
fn approximate_recall_on_gaussian_corpora() {
    let recalls = common::ann::approximate_recall(&[1, 2, 3, 4, 5]);
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    assert!(mean >= 0.95, "recall per seed {recalls:?}");
}

#[test]
fn round_trip_is_query_identical() {
    let dir = tempfile::tempdir().unwrap();
    assert!(common::ann::round_trip_identical(dir.path()));
}

#[test]
fn damaged_files_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let index = AnnIndex::build(ids(1500), &gaussian(1500, 4, &mut rng), IndexOptions::default()).unwrap();
    let bytes = index.to_bytes().unwrap();
    assert!(AnnIndex::from_bytes(&bytes).is_ok());
    for cut in [0, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(AnnIndex::from_bytes(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    for pos in [3, 20, bytes.len() / 3, bytes.len() - 2] {
        let mut flipped = bytes.clone();
        flipped[pos] ^= 0x40;
        assert!(AnnIndex::from_bytes(&flipped).is_err(), "flipped byte {pos}");
    }
}

#[test]
fn queries_do_not_change_the_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let index = AnnIndex::build(ids(2000), &gaussian(2000, 6, &mut rng), IndexOptions::default()).unwrap();
    let before = index.content_hash().unwrap();
    let probes = gaussian(50, 6, &mut rng);
    for i in 0..probes.rows() {
        index.query(probes.row(i), 10, 100).unwrap();
    }
    assert_eq!(index.content_hash().unwrap(), before);
}

#[test]
fn hand_computed_cosines() {
    let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, -3.0]]);
    let index = AnnIndex::build(vec!["a".into(), "b".into(), "c".into()], &v, IndexOptions::default()).unwrap();
    let r = index.query(&[2.0, 0.0], 3, 3).unwrap();
    let names: Vec<&str> = r.iter().map(|x| x.0.as_str()).collect();
    assert_eq!(names, ["a", "b", "c"]);
    assert!((r[0].1 - 1.0).abs() < 1e-6);
    assert!((r[1].1 - 0.5f64.sqrt()).abs() < 1e-6);
    assert!(r[2].1.abs() < 1e-6);
}

#[test]
fn zero_query_scores_zero_and_orders_by_id() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let index = AnnIndex::build(ids(40), &gaussian(40, 3, &mut rng), IndexOptions::default()).unwrap();
    let r = index.query(&[0.0; 3], 4, 4).unwrap();
    assert!(r.iter().all(|x| x.1 == 0.0));
    assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["v00000", "v00001", "v00002", "v00003"]);
}

#[test]
fn bad_arguments_are_errors() {
    let v = Matrix::from_rows(&[vec![1.0, 0.0]]);
    let index = AnnIndex::build(vec!["a".into()], &v, IndexOptions::default()).unwrap();
    assert!(index.query(&[1.0, 0.0], 0, 1).is_err());
    assert!(index.query(&[1.0], 1, 1).is_err());
    assert!(AnnIndex::build(vec![], &Matrix::zeros(0, 2), IndexOptions::default()).is_err());
}
