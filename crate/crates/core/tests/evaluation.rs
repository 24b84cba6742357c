use glitter::checkpoint::Checkpoint;
use glitter::dataset::Dataset;
use glitter::episode::{make_split, Episode, Phase, Setting};
use glitter::eval::{
    evaluate, evaluate_knn, knn_predict, protonet_baseline_eval, protonet_baseline_train,
    protonet_predict, test_episode, EvalOptions, ProtoConfig,
};
use glitter::graph::Graph;
use glitter::model::EncoderParams;
use glitter::sbm::{generate_sbm_dataset, SbmConfig};
use glitter::structure::TaskStructure;
use glitter::trainer::{train, TrainConfig};
use glitter::verify::{run_suite, Suite};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn data(center_scale: f64) -> Dataset {
    generate_sbm_dataset(&SbmConfig {
        classes_per_graph: 10,
        nodes_per_class: 20,
        feature_dim: 8,
        center_scale,
        noise_sigma: 0.2,
        ..Default::default()
    })
    .unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        n_way: 3,
        k_shot: 3,
        q_query: 6,
        eta: 3,
        epochs: 6,
        setting: Setting::SingleGraphDisjointLabel,
        split_train: 0.5,
        split_val: 0.2,
        split_test: 0.3,
        ..Default::default()
    }
}

const OPTS: EvalOptions = EvalOptions {
    repetitions: 2,
    episodes_per_rep: 3,
    workers: 1,
};

#[test]
fn evaluation_leaves_the_checkpoint_alone_and_is_order_independent() {
    let data = data(1.0);
    let cfg = cfg();
    let out = train(&data, &cfg).unwrap();
    let before = out.checkpoint.fingerprint();
    let serial = evaluate(&out.checkpoint, &data, &cfg, OPTS).unwrap();
    let parallel = evaluate(
        &out.checkpoint,
        &data,
        &cfg,
        EvalOptions { workers: 4, ..OPTS },
    )
    .unwrap();
    assert_eq!(out.checkpoint.fingerprint(), before);
    assert_eq!(serial, parallel);
    assert_eq!(serial.per_repetition_accuracy.len(), 2);
    let mean = serial.per_repetition_accuracy.iter().sum::<f64>() / 2.0;
    assert!((serial.mean - mean).abs() < 1e-15);
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let data = data(1.0);
    let cfg = cfg();
    let ckpt = Checkpoint::new(
        cfg.init_params(data.feature_dim),
        cfg.clone(),
        data.feature_dim,
        0,
    );
    let wider = TrainConfig {
        hidden_dim: 32,
        ..cfg
    };
    assert!(evaluate(&ckpt, &data, &wider, OPTS).is_err());
}

#[test]
fn models_see_the_same_episode_stream() {
    let data = data(1.0);
    let cfg = cfg();
    let split = make_split(&data, cfg.setting, cfg.split_ratios(), cfg.n_way, cfg.seed).unwrap();
    let a = test_episode(&data, &split, &cfg, 1, 2).unwrap();
    let b = test_episode(&data, &split, &cfg, 1, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.phase, Phase::Test);
}

fn line_episode() -> (Episode, DMatrix<f64>) {
    // Supports 0,1 in slot 0 and 2,3 in slot 1; queries 4 (like slot 1) and 5 (like slot 0).
    let features = DMatrix::from_row_slice(
        6,
        2,
        &[1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9, 0.2, 0.8, 0.8, 0.2],
    );
    let ep = Episode {
        graph_id: 0,
        phase: Phase::Test,
        class_slots: vec![4, 7],
        support: vec![vec![0, 1], vec![2, 3]],
        query: vec![4, 5],
        query_slots: vec![1, 0],
    };
    (ep, features)
}

#[test]
fn knn_matches_hand_computed_votes() {
    let (ep, x) = line_episode();
    assert_eq!(knn_predict(&ep, &x, 1).unwrap().predicted, vec![1, 0]);
    assert_eq!(knn_predict(&ep, &x, 3).unwrap().predicted, vec![1, 0]);
    // k = 4 splits 2:2 and the tie goes to slot 0.
    assert_eq!(knn_predict(&ep, &x, 4).unwrap().predicted, vec![0, 0]);
    assert!(knn_predict(&ep, &x, 0).is_err());
}

#[test]
fn knn_on_separable_data_beats_chance() {
    let data = data(1.0);
    let r = evaluate_knn(
        &data,
        &cfg(),
        1,
        EvalOptions {
            repetitions: 3,
            episodes_per_rep: 10,
            workers: 1,
        },
    )
    .unwrap();
    assert!(r.mean > 0.9, "{r}");
}

fn prototype_task(k: usize) -> (TaskStructure, DMatrix<f64>) {
    let n = 2 * k + 2;
    let graph = Graph::new(
        0,
        Vec::<(usize, usize)>::new(),
        DMatrix::zeros(n, 2),
        vec![None; n],
    )
    .unwrap();
    let slots: Vec<usize> = (0..2).flat_map(|s| std::iter::repeat_n(s, k)).collect();
    let task = TaskStructure::from_parts(&graph, (0..n).collect(), slots, vec![0, 1], 2).unwrap();
    let mut x = DMatrix::zeros(n, 2);
    for r in 0..k {
        x[(r, 0)] = 1.0;
        x[(k + r, 1)] = 1.0;
    }
    x[(2 * k, 0)] = 1.0;
    x[(2 * k + 1, 1)] = 1.0;
    (task, x)
}

fn identity_encoder() -> EncoderParams {
    EncoderParams {
        gcn_w1: DMatrix::identity(2, 2),
        gcn_w2: DMatrix::identity(2, 2),
        clf_w: DMatrix::zeros(2, 2),
        clf_b: nalgebra::DVector::zeros(2),
    }
}

proptest! {
    #[test]
    fn query_equal_to_a_prototype_gets_that_slot(k in 1usize..5) {
        let (task, x) = prototype_task(k);
        let adjacency = DMatrix::identity(task.len(), task.len());
        let p = protonet_predict(&adjacency, &x, &task, &identity_encoder()).unwrap();
        prop_assert_eq!(p.predicted, vec![0, 1]);
    }
}

#[test]
fn protonet_on_separable_data_beats_chance() {
    let data = data(1.0);
    let cfg = TrainConfig {
        epochs: 30,
        ..cfg()
    };
    let params = protonet_baseline_train(&data, &cfg, ProtoConfig::default()).unwrap();
    let r = protonet_baseline_eval(
        &params,
        &data,
        &cfg,
        EvalOptions {
            repetitions: 3,
            episodes_per_rep: 10,
            workers: 1,
        },
    )
    .unwrap();
    assert!(r.mean >= 1.0 / 3.0 + 0.15, "{r}");
}

#[test]
fn report_display_lists_every_repetition() {
    let data = data(1.0);
    let r = evaluate_knn(&data, &cfg(), 1, OPTS).unwrap();
    let text = r.to_string();
    assert!(text.contains("knn"));
    assert_eq!(text.lines().count(), 2 + 2 + 1);
}

#[test]
fn gradient_and_sampling_suites_pass() {
    for suite in [Suite::Gradients, Suite::Sampling] {
        let report = run_suite(&suite, 0).unwrap();
        assert!(report.passed(), "{report}");
    }
    assert!("bogus".parse::<Suite>().is_err());
}
