use std::collections::BTreeSet;

use lakescope::annindex::{AnnIndex, IndexOptions};
use lakescope::corpus::{split, DataLake, NlStatement, Split};
use lakescope::encoder::EncoderMode;
use lakescope::graphgen::NodeKind;
use lakescope::harness::benchmark::{build_graph, fit_classifier};
use lakescope::harness::synthetic::{generate_synthetic_lake, SyntheticSpec};
use lakescope::retrieval::{binary_retrieve, candidate_count, rank_tables, Mode, Query, QueryEmbedder, RetrievalEngine};
use lakescope::tensor::{cosine, l2_norm};
use lakescope::trainer::{materialize_embeddings, train, Checkpoint, Hyperparams, TrainOutput};

fn small_hyper() -> Hyperparams {
    Hyperparams {
        d: 16,
        d_c: 64,
        epochs: 4,
        encoder: EncoderMode::Linear,
        classifier_epochs: 20,
        ..Default::default()
    }
}

fn lake() -> DataLake {
    generate_synthetic_lake(&SyntheticSpec::default()).unwrap()
}

fn run(lake: &DataLake, hyper: &Hyperparams) -> (Split, TrainOutput) {
    let sp = split(lake, &hyper.split).unwrap();
    let graph = build_graph(lake, &sp, hyper).unwrap();
    let out = train(lake, &graph, &sp, hyper).unwrap();
    (sp, out)
}

#[test]
fn test_labels_do_not_reach_training() {
    let hyper = small_hyper();
    let original = lake();
    let sp = split(&original, &hyper.split).unwrap();
    // every test statement now points at one arbitrary table
    let labels: BTreeSet<(String, String)> = original
        .nl_table_labels
        .iter()
        .filter(|(s, _)| !sp.statements.test.contains(s))
        .cloned()
        .chain(sp.statements.test.iter().map(|s| (s.clone(), "t_c0_000".to_string())))
        .collect();
    let altered = DataLake::new(original.tables.clone(), original.statements.clone(), labels, None).unwrap();
    assert_eq!(build_graph(&original, &sp, &hyper).unwrap(), build_graph(&altered, &sp, &hyper).unwrap());
    let a = run(&original, &hyper).1.checkpoint.to_bytes().unwrap();
    let b = run(&altered, &hyper).1.checkpoint.to_bytes().unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_is_deterministic() {
    let hyper = small_hyper();
    let lake = lake();
    let (_, a) = run(&lake, &hyper);
    let (_, b) = run(&lake, &hyper);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.trace, b.trace);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let lake = lake();
    let one = Hyperparams {
        learning_rate: 0.0,
        epochs: 1,
        ..small_hyper()
    };
    let three = Hyperparams { epochs: 3, ..one.clone() };
    let a = run(&lake, &one).1.checkpoint;
    let b = run(&lake, &three).1.checkpoint;
    assert_eq!(a.params, b.params);
}

#[test]
fn reconstruction_loss_decreases_without_contrast() {
    let hyper = Hyperparams {
        beta: 0.0,
        lambda: 1.0,
        epochs: 15,
        learning_rate: 5e-3,
        ..small_hyper()
    };
    let (_, out) = run(&lake(), &hyper);
    let first = out.trace.first().unwrap();
    let last = out.trace.last().unwrap();
    assert!(last.reconstruction < first.reconstruction, "{} -> {}", first.reconstruction, last.reconstruction);
    assert!((last.loss - last.reconstruction).abs() < 1e-12);
}

struct Trained {
    lake: DataLake,
    split: Split,
    checkpoint: Checkpoint,
    engine: RetrievalEngine,
}

fn trained() -> Trained {
    let hyper = small_hyper();
    let lake = lake();
    let sp = split(&lake, &hyper.split).unwrap();
    let graph = build_graph(&lake, &sp, &hyper).unwrap();
    let checkpoint = train(&lake, &graph, &sp, &hyper).unwrap().checkpoint;
    let emb = materialize_embeddings(&checkpoint, &graph, &lake).unwrap();
    let embedder = QueryEmbedder::new(&checkpoint, &lake, &emb.path_weights).unwrap();
    let (clf, _) = fit_classifier(&lake, &sp, &embedder, &emb, &hyper).unwrap();
    let index = AnnIndex::build(emb.table_ids().to_vec(), &emb.table_vectors(), IndexOptions::default()).unwrap();
    let graph_hash = graph.structural_hash();
    // held-out statements have no statement-table edges, so their stored
    // embedding is the query-mode one up to stored precision
    for s in lake.statements.iter().filter(|s| sp.statements.test.contains(&s.id)) {
        let q = embedder.embed(&Query::Nl(s.clone())).unwrap();
        let stored = emb.get(&s.id, NodeKind::Statement).unwrap();
        assert!(cosine(&q.vector, stored) >= 0.99, "{}", s.id);
    }
    assert_eq!(graph.structural_hash(), graph_hash);
    let engine = RetrievalEngine::new(embedder, index, Some(clf), &hyper);
    Trained {
        lake,
        split: sp,
        checkpoint,
        engine,
    }
}

fn nl(id: &str, text: &str) -> Query {
    Query::Nl(NlStatement {
        id: id.into(),
        text: text.into(),
    })
}

#[test]
fn query_embeddings_and_retrieval_contracts() {
    let t = trained();
    let e = &t.engine;
    assert_eq!(e.embedder.dim(), t.checkpoint.hyper.d);

    let q = nl("q", &t.lake.statements[0].text);
    let h = e.embed(&q).unwrap();
    assert!((l2_norm(&h.vector) - 1.0).abs() < 1e-9);
    assert_eq!(h, e.embed(&q).unwrap());
    assert!(h.attached.len() <= t.checkpoint.hyper.k);

    let unseen = e.embed(&nl("u", "zzqx vvyy unseenword")).unwrap();
    assert!(unseen.vector.iter().all(|x| x.is_finite()));
    assert!(unseen.attached.is_empty());
    assert!(e.embed(&nl("e", "  ")).is_err());

    // ranked: length, order, uniqueness
    for k in [1, 7, 50, 80] {
        let r = rank_tables(&h.vector, &e.index, k, 10 * k).unwrap();
        assert_eq!(r.len(), k.min(e.index.len()));
        assert!(r.windows(2).all(|w| w[0].score >= w[1].score));
        let ids: BTreeSet<&str> = r.iter().map(|s| s.table_id.as_str()).collect();
        assert_eq!(ids.len(), r.len());
    }

    // binary: selected tables are candidates with probability above 0.5
    let clf = e.classifier.as_ref().unwrap();
    for fraction in [0.02, 0.5, 1.0] {
        let b = binary_retrieve(&h.vector, &e.index, clf, fraction, 10).unwrap();
        assert_eq!(b.candidates.len(), candidate_count(fraction, e.index.len()));
        let cands: BTreeSet<&str> = b.candidates.iter().map(String::as_str).collect();
        assert!(b.selected.iter().all(|s| cands.contains(s.table_id.as_str()) && s.score > 0.5));
    }
    assert!(binary_retrieve(&h.vector, &e.index, clf, 0.0, 10).is_err());
}

#[test]
fn both_modalities_share_the_retrieval_path() {
    let t = trained();
    let e = &t.engine;
    let stmt = t
        .lake
        .statements
        .iter()
        .find(|s| t.split.statements.test.contains(&s.id))
        .unwrap();
    let table = Query::Table(t.lake.tables[3].clone());
    let before = e.counters.snapshot();
    for q in [Query::Nl(stmt.clone()), table] {
        for mode in [Mode::Ranked, Mode::Binary] {
            let r = e.retrieve(&q, mode, 5).unwrap();
            assert_eq!(r.query_id, q.id());
            assert_eq!(r.mode, mode);
        }
    }
    let after = e.counters.snapshot();
    let delta: Vec<usize> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    assert_eq!(delta, [2, 2, 2, 2]);
}
