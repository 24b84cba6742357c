use std::collections::BTreeSet;

use glitter::episode::{
    make_split, sample_episode, substream, Phase, Setting, SplitRatios, Stream,
};
use glitter::graph::{bfs_spd, row_normalize, spd_submatrix, Graph, UNREACHABLE};
use glitter::sbm::{generate_sbm_dataset, SbmConfig};
use glitter::structure::{assemble_task_nodes, common_sample, local_sample};
use glitter::GlitterError;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn graph_strategy() -> impl Strategy<Value = Graph> {
    (2usize..20).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0..n), 0..3 * n).prop_map(move |edges| {
            Graph::new(0, edges, DMatrix::zeros(n, 2), vec![None; n]).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn distances_are_symmetric_and_satisfy_triangle_inequality(g in graph_strategy()) {
        let n = g.node_count();
        let d: Vec<Vec<u32>> = (0..n).map(|s| bfs_spd(&g, s).unwrap().dist).collect();
        for i in 0..n {
            prop_assert_eq!(d[i][i], 0);
            for j in 0..n {
                prop_assert_eq!(d[i][j], d[j][i]);
                for k in 0..n {
                    if d[i][k] != UNREACHABLE && d[k][j] != UNREACHABLE {
                        prop_assert!(d[i][j] <= d[i][k] + d[k][j]);
                    }
                }
            }
        }
        for &(u, v) in g.edges() {
            prop_assert_eq!(d[u][v], 1);
        }
    }

    #[test]
    fn local_sample_contains_support_and_grows_with_radius(g in graph_strategy(), h in 0u32..4) {
        let support = vec![0, g.node_count() - 1];
        let small = local_sample(&g, &support, h).unwrap();
        let large = local_sample(&g, &support, h + 1).unwrap();
        prop_assert!(support.iter().all(|s| small.contains(s)));
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn common_sample_respects_budget_and_exclusions(g in graph_strategy(), c in 0usize..5) {
        let n = g.node_count();
        let by_class = vec![vec![0], vec![n - 1]];
        let exclude: BTreeSet<usize> = [0, n - 1].into_iter().collect();
        let picked = common_sample(&g, &by_class, c, &exclude).unwrap();
        prop_assert!(picked.len() <= 2 * c);
        prop_assert!(picked.is_disjoint(&exclude));
    }

    #[test]
    fn row_normalize_gives_stochastic_rows(
        vals in prop::collection::vec(0.01f64..5.0, 16)
    ) {
        let m = DMatrix::from_vec(4, 4, vals);
        let r = row_normalize(&m).unwrap();
        for row in r.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn spd_submatrix_on_path() {
    let g = Graph::new(
        0,
        [(0, 1), (1, 2), (2, 3)],
        DMatrix::zeros(5, 1),
        vec![None; 5],
    )
    .unwrap();
    let d = spd_submatrix(&g, &[3, 0, 4]).unwrap();
    assert_eq!(d[(0, 1)], 3);
    assert_eq!(d[(1, 0)], 3);
    assert_eq!(d[(0, 2)], UNREACHABLE);
}

fn sbm(num_graphs: usize) -> glitter::dataset::Dataset {
    generate_sbm_dataset(&SbmConfig {
        num_graphs,
        classes_per_graph: 10,
        nodes_per_class: 12,
        feature_dim: 4,
        ..Default::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn episodes_are_well_formed(seed in 0u64..1000, n in 2usize..5, k in 1usize..4, q in 1usize..12) {
        let data = sbm(1);
        let split = make_split(&data, Setting::SingleGraphDisjointLabel, SplitRatios { train: 0.5, val: 0.0, test: 0.5 }, n, seed).unwrap();
        let mut rng = substream(seed, Stream::TrainEpisodes, 0, 0);
        let ep = sample_episode(&data, &split, Phase::Train, n, k, q, &mut rng).unwrap();
        prop_assert_eq!(ep.n_way(), n);
        prop_assert!(ep.support.iter().all(|s| s.len() == k));
        prop_assert_eq!(ep.query.len(), q);
        let support: BTreeSet<usize> = ep.support_nodes().into_iter().collect();
        let query: BTreeSet<usize> = ep.query.iter().copied().collect();
        prop_assert_eq!(support.len(), n * k);
        prop_assert_eq!(query.len(), q);
        prop_assert!(support.is_disjoint(&query));
        let g = data.graph(ep.graph_id).unwrap();
        for (slot, nodes) in ep.support.iter().enumerate() {
            for &v in nodes {
                prop_assert_eq!(g.label(v), Some(ep.class_slots[slot]));
            }
        }
        for (&v, &slot) in ep.query.iter().zip(&ep.query_slots) {
            prop_assert_eq!(g.label(v), Some(ep.class_slots[slot]));
        }
        prop_assert!(ep.class_slots.iter().all(|c| split.train_classes.contains(c)));
    }

    #[test]
    fn splits_honor_their_setting(seed in 0u64..1000) {
        let data = sbm(10);
        for setting in [Setting::SharedGraphDisjointLabel, Setting::DisjointGraphSharedLabel, Setting::DisjointGraphDisjointLabel] {
            let s = make_split(&data, setting, SplitRatios { train: 0.6, val: 0.2, test: 0.2 }, 2, seed).unwrap();
            let tr: BTreeSet<_> = s.train_classes.iter().collect();
            let te: BTreeSet<_> = s.test_classes.iter().collect();
            prop_assert_eq!(tr.is_disjoint(&te), setting.disjoint_labels());
            let gtr: BTreeSet<_> = s.train_graphs.iter().collect();
            let gte: BTreeSet<_> = s.test_graphs.iter().collect();
            prop_assert_eq!(gtr.is_disjoint(&gte), setting.disjoint_graphs());
        }
    }
}

#[test]
fn task_rows_start_with_supports_then_queries() {
    let data = sbm(1);
    let split = make_split(
        &data,
        Setting::SingleGraphDisjointLabel,
        SplitRatios {
            train: 0.5,
            val: 0.0,
            test: 0.5,
        },
        3,
        1,
    )
    .unwrap();
    let mut rng = substream(1, Stream::TrainEpisodes, 0, 0);
    let ep = sample_episode(&data, &split, Phase::Train, 3, 2, 4, &mut rng).unwrap();
    let task = assemble_task_nodes(data.graph(0).unwrap(), &ep, 2, 3).unwrap();
    assert_eq!(&task.node_list[..6], &ep.support_nodes()[..]);
    assert_eq!(&task.node_list[6..10], &ep.query[..]);
    assert_eq!(task.support_slots, ep.support_slots());
    let unique: BTreeSet<_> = task.node_list.iter().collect();
    assert_eq!(unique.len(), task.len());
}

#[test]
fn too_few_classes_is_a_sampling_error() {
    let data = sbm(1);
    let split = make_split(
        &data,
        Setting::SingleGraphDisjointLabel,
        SplitRatios {
            train: 0.5,
            val: 0.0,
            test: 0.5,
        },
        3,
        1,
    )
    .unwrap();
    let mut rng = substream(1, Stream::TrainEpisodes, 0, 0);
    let err = sample_episode(&data, &split, Phase::Train, 6, 2, 4, &mut rng).unwrap_err();
    assert!(matches!(err, GlitterError::Sampling { .. }));
}

#[test]
fn same_substream_gives_same_episode() {
    let data = sbm(1);
    let split = make_split(
        &data,
        Setting::SingleGraphDisjointLabel,
        SplitRatios {
            train: 0.5,
            val: 0.0,
            test: 0.5,
        },
        3,
        9,
    )
    .unwrap();
    let a = sample_episode(
        &data,
        &split,
        Phase::Test,
        3,
        2,
        5,
        &mut substream(9, Stream::TestEpisodes, 2, 7),
    )
    .unwrap();
    let b = sample_episode(
        &data,
        &split,
        Phase::Test,
        3,
        2,
        5,
        &mut substream(9, Stream::TestEpisodes, 2, 7),
    )
    .unwrap();
    let c = sample_episode(
        &data,
        &split,
        Phase::Test,
        3,
        2,
        5,
        &mut substream(9, Stream::TestEpisodes, 2, 8),
    )
    .unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
