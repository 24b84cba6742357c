use glitter::checkpoint::{fingerprint, load_checkpoint, save_checkpoint, Checkpoint};
use glitter::dataset::{load_dataset, save_dataset, Dataset};
use glitter::episode::{make_split, sample_episode, substream, Phase, Setting, Stream};
use glitter::model::DropoutMask;
use glitter::objective::{compute_gradients, Groups, LossKind, TaskContext};
use glitter::sbm::{generate_sbm_dataset, SbmConfig};
use glitter::structure::TaskStructure;
use glitter::trainer::{inner_adapt, meta_update, prepare_task, train, TrainConfig};
use glitter::GlitterError;
use nalgebra::DMatrix;

fn data() -> Dataset {
    generate_sbm_dataset(&SbmConfig {
        classes_per_graph: 6,
        nodes_per_class: 12,
        feature_dim: 5,
        p_intra: 0.2,
        p_inter: 0.01,
        ..Default::default()
    })
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        n_way: 2,
        k_shot: 2,
        q_query: 4,
        h: 1,
        c: 2,
        eta: 2,
        epochs: 4,
        hidden_dim: 4,
        d_a: 3,
        d_max: 3,
        setting: Setting::SingleGraphDisjointLabel,
        split_train: 0.5,
        split_val: 0.0,
        split_test: 0.5,
        ..Default::default()
    }
}

fn one_task(data: &Dataset, cfg: &TrainConfig) -> (TaskStructure, DMatrix<f64>) {
    let split = make_split(data, cfg.setting, cfg.split_ratios(), cfg.n_way, cfg.seed).unwrap();
    let mut rng = substream(cfg.seed, Stream::TrainEpisodes, 0, 0);
    let ep = sample_episode(
        data,
        &split,
        Phase::Train,
        cfg.n_way,
        cfg.k_shot,
        cfg.q_query,
        &mut rng,
    )
    .unwrap();
    prepare_task(data, &ep, cfg).unwrap()
}

#[test]
fn zero_inner_rate_leaves_parameters_untouched() {
    let data = data();
    let cfg = TrainConfig {
        alpha: 0.0,
        ..small_cfg()
    };
    let (task, x) = one_task(&data, &cfg);
    let params = cfg.init_params(data.feature_dim);
    let (adapted, trace) = inner_adapt(
        &task,
        &x,
        &params,
        &cfg,
        &mut substream(0, Stream::TrainModel, 0, 0),
    )
    .unwrap();
    assert_eq!(adapted, params);
    assert_eq!(trace.support_loss.len(), cfg.eta);
}

#[test]
fn zero_meta_rates_return_adapted_parameters() {
    let data = data();
    let cfg = TrainConfig {
        beta1: 0.0,
        beta2: 0.0,
        ..small_cfg()
    };
    let (task, x) = one_task(&data, &cfg);
    let params = cfg.init_params(data.feature_dim);
    let (next, step) = meta_update(
        &task,
        &x,
        &params,
        &cfg,
        &mut substream(0, Stream::TrainModel, 0, 0),
    )
    .unwrap();
    assert_eq!(next, step.adapted);
    let classic = TrainConfig {
        classic_maml: true,
        ..cfg
    };
    let (next, _) = meta_update(
        &task,
        &x,
        &params,
        &classic,
        &mut substream(0, Stream::TrainModel, 0, 0),
    )
    .unwrap();
    assert_eq!(next, params);
}

#[test]
fn two_inner_steps_replay_by_hand() {
    let data = data();
    let cfg = small_cfg();
    let (task, x) = one_task(&data, &cfg);
    let params = cfg.init_params(data.feature_dim);
    let (adapted, _) = inner_adapt(
        &task,
        &x,
        &params,
        &cfg,
        &mut substream(0, Stream::TrainModel, 0, 0),
    )
    .unwrap();

    let mut rng = substream(0, Stream::TrainModel, 0, 0);
    let mut p = params.clone();
    for _ in 0..2 {
        let mask = DropoutMask::sample(task.len(), cfg.hidden_dim, cfg.dropout_rate, &mut rng);
        let ctx = TaskContext {
            task: &task,
            features: &x,
            truncation: cfg.m,
            normalize_scores: cfg.normalize_class_scores,
            dropout: Some(&mask),
        };
        let g = compute_gradients(LossKind::Structure, &ctx, &p, Groups::ALL)
            .unwrap()
            .grads;
        p.structure.w1 -= cfg.alpha * &g.structure.w1;
        p.structure.w2 -= cfg.alpha * &g.structure.w2;
        p.structure.psi -= cfg.alpha * &g.structure.psi;
        let g = compute_gradients(LossKind::Support, &ctx, &p, Groups::ALL)
            .unwrap()
            .grads;
        p.encoder.gcn_w1 -= cfg.alpha * &g.encoder.gcn_w1;
        p.encoder.gcn_w2 -= cfg.alpha * &g.encoder.gcn_w2;
        p.encoder.clf_w -= cfg.alpha * &g.encoder.clf_w;
        p.encoder.clf_b -= cfg.alpha * &g.encoder.clf_b;
    }
    assert!(adapted.max_abs_diff(&p) < 1e-12);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = data();
    let cfg = TrainConfig {
        epochs: 0,
        ..small_cfg()
    };
    let out = train(&data, &cfg).unwrap();
    assert_eq!(out.checkpoint.params, cfg.init_params(data.feature_dim));
    assert!(out.log.records.is_empty());
}

#[test]
fn training_is_deterministic_and_seed_dependent() {
    let data = data();
    let cfg = small_cfg();
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    let c = train(&data, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_eq!(a.checkpoint.fingerprint(), b.checkpoint.fingerprint());
    assert_ne!(a.checkpoint.fingerprint(), c.checkpoint.fingerprint());
    assert_eq!(a.log.records, b.log.records);
    assert_eq!(a.log.records.len(), 4);
}

#[test]
fn invalid_configurations_are_rejected() {
    let data = data();
    for cfg in [
        TrainConfig {
            n_way: 1,
            ..small_cfg()
        },
        TrainConfig {
            eta: 0,
            ..small_cfg()
        },
        TrainConfig {
            first_order: false,
            ..small_cfg()
        },
        TrainConfig {
            dropout_rate: 1.0,
            ..small_cfg()
        },
        TrainConfig {
            alpha: f64::NAN,
            ..small_cfg()
        },
    ] {
        assert!(matches!(train(&data, &cfg), Err(GlitterError::Config(_))));
    }
}

#[test]
fn exploding_inner_rate_reports_the_trace() {
    let data = data();
    let cfg = TrainConfig {
        alpha: 1e200,
        eta: 5,
        ..small_cfg()
    };
    match train(&data, &cfg) {
        Err(GlitterError::Training { trace, .. }) => assert!(trace.support_loss.len() < 5),
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|o| o.checkpoint.fingerprint())
        ),
    }
}

#[test]
fn train_log_is_json_lines() {
    let data = data();
    let out = train(&data, &small_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    out.log.write_jsonl(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["episode"], 0);
    assert!(lines[4]["wall_time_secs"].is_number());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let data = data();
    let cfg = small_cfg();
    let out = train(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(fingerprint(&back.params), out.checkpoint.fingerprint());
}

#[test]
fn truncated_checkpoint_names_the_line() {
    let data = data();
    let cfg = small_cfg();
    let ckpt = Checkpoint::new(cfg.init_params(data.feature_dim), cfg, data.feature_dim, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let keep: Vec<&str> = text.lines().take(12).collect();
    std::fs::write(&path, keep.join("\n")).unwrap();
    match load_checkpoint(&path) {
        Err(GlitterError::Parse { record, .. }) => assert!(record.ends_with(":12"), "{record}"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn checkpoint_shape_mismatch_is_a_schema_error() {
    let cfg16 = TrainConfig {
        hidden_dim: 16,
        ..small_cfg()
    };
    let cfg32 = TrainConfig {
        hidden_dim: 32,
        ..small_cfg()
    };
    let ckpt = Checkpoint::new(cfg16.init_params(5), cfg16, 5, 0);
    assert!(matches!(
        ckpt.check_compatible(&cfg32, 5),
        Err(GlitterError::Schema(_))
    ));
    assert!(ckpt.check_compatible(&ckpt.config.clone(), 5).is_ok());
}

#[test]
fn dataset_round_trip_and_bad_records() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), data);

    let graph_file = dir.path().join("graph_0.txt");
    let text = std::fs::read_to_string(&graph_file).unwrap();
    std::fs::write(&graph_file, text.replacen("node", "nod", 1)).unwrap();
    assert!(matches!(
        load_dataset(dir.path()),
        Err(GlitterError::Parse { .. })
    ));
}
