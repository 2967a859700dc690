use crossret_core::eval::{Pipeline, RetrievalMode};
use crossret_core::synth::SynthSpec;
use crossret_core::{
    EnsembleMode, Error, Index, IndexMode, InferenceConfig, QuerySet, RetrievalConfig, Retriever,
};

fn small() -> crossret_core::synth::SynthData {
    SynthSpec {
        corpus_size: 120,
        queries: 24,
        ..SynthSpec::default()
    }
    .generate()
    .unwrap()
}

fn config(n: usize, k: usize) -> RetrievalConfig {
    RetrievalConfig {
        n_candidates: n,
        k_captions: k,
        ..RetrievalConfig::default()
    }
}

#[test]
fn pipeline_rejects_bad_parameters() {
    let data = small();
    let index = Index::build(data.corpus.matrix("coarse").unwrap(), IndexMode::Exact).unwrap();
    let r = Retriever::new(&data.corpus, &index, &config(16, 4)).unwrap();
    let p = Pipeline::new(
        r.clone(),
        &data.classes,
        config(16, 4),
        InferenceConfig::default(),
    )
    .unwrap();

    assert!(matches!(
        p.sweep_k(&data.queries, &[2, 32], EnsembleMode::Modal, &[0]),
        Err(Error::KExceedsN { k: 32, n: 16 })
    ));
    assert!(matches!(
        p.sweep_n(&data.queries, &[2], EnsembleMode::Modal, &[0]),
        Err(Error::KExceedsN { k: 4, n: 2 })
    ));
    assert!(matches!(
        Pipeline::new(
            r.clone(),
            &data.classes,
            config(4, 8),
            InferenceConfig::default()
        ),
        Err(Error::KExceedsN { .. })
    ));
    let bad_space = InferenceConfig {
        space: "fine".into(),
        ..InferenceConfig::default()
    };
    assert!(matches!(
        Pipeline::new(r, &data.classes, config(16, 4), bad_space),
        Err(Error::MissingSpace(_))
    ));

    let matrices: Vec<_> = ["coarse", "query_fine", "inference"]
        .iter()
        .map(|s| data.queries.matrix(s).unwrap().clone())
        .collect();
    let unlabelled = QuerySet::new(data.queries.ids().to_vec(), None, matrices.clone()).unwrap();
    assert!(matches!(
        p.evaluate(&unlabelled, EnsembleMode::Modal, 0),
        Err(Error::MissingLabels)
    ));
    let mut labels = data.queries.labels().unwrap().to_vec();
    labels[3] = 9;
    let out_of_range = QuerySet::new(data.queries.ids().to_vec(), Some(labels), matrices).unwrap();
    assert!(matches!(
        p.evaluate(&out_of_range, EnsembleMode::Modal, 0),
        Err(Error::LabelOutOfRange {
            label: 9,
            classes: 4
        })
    ));
}

#[test]
fn shuffle_changes_order_not_image_accuracy() {
    let data = small();
    let index = Index::build(data.corpus.matrix("coarse").unwrap(), IndexMode::Exact).unwrap();
    let r = Retriever::new(&data.corpus, &index, &config(32, 8)).unwrap();
    let p = Pipeline::new(r, &data.classes, config(32, 8), InferenceConfig::default()).unwrap();
    let runs = p
        .evaluate_with(
            &data.queries,
            EnsembleMode::Modal,
            RetrievalMode::Direct,
            &[0, 1],
        )
        .unwrap();
    let order = |i: usize| {
        runs[i]
            .samples
            .iter()
            .map(|s| s.query_id)
            .collect::<Vec<_>>()
    };
    assert_ne!(order(0), order(1));
    assert_eq!(runs[0].summary.acc.img_acc, runs[1].summary.acc.img_acc);
    assert_eq!(runs[0].summary.acc.txt_acc, runs[1].summary.acc.txt_acc);

    // equal mode never looks at history, so the order cannot matter
    let eq = p
        .evaluate_with(
            &data.queries,
            EnsembleMode::Equal,
            RetrievalMode::Direct,
            &[0, 1],
        )
        .unwrap();
    assert_eq!(eq[0].summary, eq[1].summary);
}

#[test]
fn ivf_pipeline_with_all_probes_matches_exact() {
    let data = small();
    let m = data.corpus.matrix("coarse").unwrap();
    let exact = Index::build(m, IndexMode::Exact).unwrap();
    let ivf = Index::build(
        m,
        IndexMode::Ivf {
            num_lists: 6,
            seed: 1,
        },
    )
    .unwrap();
    let run = |index: &Index| {
        let r = Retriever::new(&data.corpus, index, &config(16, 4)).unwrap();
        Pipeline::new(r, &data.classes, config(16, 4), InferenceConfig::default())
            .unwrap()
            .evaluate(&data.queries, EnsembleMode::Modal, 3)
            .unwrap()
    };
    assert_eq!(run(&exact), run(&ivf));
}
