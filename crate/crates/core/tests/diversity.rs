mod common;

use std::collections::HashSet;

use common::{dense_pagerank, kernel_cka};
use mutattack_core::diversity::{
    extract_features, greedy_generate, linear_cka, pagerank, FeatureMatrix, GreedyConfig,
    PageRankConfig, SelectionMode, SimilarityMatrix,
};
use mutattack_core::nn::{Layer, LayerSpec, Network};
use mutattack_core::{Dataset, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_features(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q()
}

fn times(h: &FeatureMatrix, q: &DMatrix<f64>) -> FeatureMatrix {
    let m = DMatrix::<f64>::from_row_slice(h.rows(), h.cols(), h.data());
    let p = m * q;
    let data: Vec<f64> = (0..p.nrows())
        .flat_map(|r| (0..p.ncols()).map(move |c| (r, c)))
        .map(|(r, c)| p[(r, c)])
        .collect();
    FeatureMatrix::new(h.rows(), q.ncols(), data).unwrap()
}

#[test]
fn cka_of_a_matrix_with_itself_is_one() {
    for seed in 0..20 {
        let h = random_features(30, 8, seed);
        assert!((linear_cka(&h, &h).unwrap() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cka_is_symmetric() {
    for seed in 0..20 {
        let a = random_features(25, 6, seed);
        let b = random_features(25, 9, seed + 1000);
        let (ab, ba) = (linear_cka(&a, &b).unwrap(), linear_cka(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-6);
        assert!((0.0..=1.0 + 1e-6).contains(&ab));
    }
}

#[test]
fn cka_is_invariant_to_orthogonal_maps_and_scaling() {
    for seed in 0..20 {
        let h = random_features(40, 7, seed);
        let other = random_features(40, 5, seed + 77);
        let q = orthogonal(7, seed);
        let rotated = times(&h, &q);
        assert!((linear_cka(&h, &rotated).unwrap() - 1.0).abs() < 1e-5);
        let base = linear_cka(&h, &other).unwrap();
        assert!((linear_cka(&rotated, &other).unwrap() - base).abs() < 1e-5);
        let scaled = FeatureMatrix::new(40, 7, h.data().iter().map(|v| v * 3.7).collect()).unwrap();
        assert!((linear_cka(&scaled, &other).unwrap() - base).abs() < 1e-5);
    }
}

#[test]
fn cka_matches_kernel_hsic_oracle() {
    for seed in 0..50 {
        let a = random_features(10, 4, seed);
        let b = random_features(10, 4, seed + 500);
        let want = kernel_cka(a.data(), 4, b.data(), 4, 10);
        let got = linear_cka(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-5, "seed {seed}: {got} vs {want}");
    }
}

fn sim_from(k: usize, values: Vec<f64>) -> SimilarityMatrix {
    SimilarityMatrix::new((0..k).map(|i| format!("n{i}")).collect(), values).unwrap()
}

fn check_against_oracle(k: usize, values: &[f64]) {
    let sim = sim_from(k, values.to_vec());
    let got = pagerank(&sim, PageRankConfig::default()).unwrap();
    let want = dense_pagerank(values, k, 0.85);
    for (g, w) in got.scores.iter().zip(&want) {
        assert!((g - w).abs() < 1e-6, "k={k}: {g} vs {w}");
    }
    assert!((got.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn pagerank_matches_dense_oracle_on_every_unweighted_graph() {
    let mut graphs = 0;
    for k in 2..=6usize {
        let edges: Vec<(usize, usize)> = (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .collect();
        for mask in 0u32..(1 << edges.len()) {
            let mut v = vec![0.0; k * k];
            for i in 0..k {
                v[i * k + i] = 1.0;
            }
            for (e, &(i, j)) in edges.iter().enumerate() {
                if mask & (1 << e) != 0 {
                    v[i * k + j] = 1.0;
                    v[j * k + i] = 1.0;
                }
            }
            check_against_oracle(k, &v);
            graphs += 1;
        }
    }
    assert_eq!(graphs, 2 + 8 + 64 + 1024 + 32768);
}

#[test]
fn pagerank_matches_dense_oracle_on_weighted_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let k = rng.random_range(2..=6);
        let mut v = vec![0.0; k * k];
        for i in 0..k {
            v[i * k + i] = 1.0;
            for j in i + 1..k {
                let s = if rng.random_bool(0.2) {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                };
                v[i * k + j] = s;
                v[j * k + i] = s;
            }
        }
        check_against_oracle(k, &v);
    }
}

#[test]
fn pagerank_is_uniform_on_complete_graphs() {
    for k in 2..=11 {
        for s in [0.05, 0.5, 1.0] {
            let v: Vec<f64> = (0..k * k)
                .map(|i| if i / k == i % k { 1.0 } else { s })
                .collect();
            let r = pagerank(&sim_from(k, v), PageRankConfig::default()).unwrap();
            for x in r.scores {
                assert!((x - 1.0 / k as f64).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn weakly_linked_node_is_least_central_by_oracle_and_iteration() {
    let v = vec![1.0, 0.9, 0.1, 0.9, 1.0, 0.1, 0.1, 0.1, 1.0];
    let oracle = dense_pagerank(&v, 3, 0.85);
    assert!(oracle[2] < oracle[0] && oracle[2] < oracle[1]);
    let r = pagerank(&sim_from(3, v), PageRankConfig::default()).unwrap();
    assert_eq!(r.argmin(), 2);
}

#[test]
fn similarity_matrix_from_features_is_valid() {
    let feats: Vec<_> = (0..4).map(|s| random_features(20, 5, s)).collect();
    let m =
        SimilarityMatrix::from_features((0..4).map(|i| i.to_string()).collect(), &feats).unwrap();
    for i in 0..4 {
        assert!((m.get(i, i) - 1.0).abs() < 1e-12);
        for j in 0..4 {
            assert_eq!(m.get(i, j), m.get(j, i));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sim.csv");
    m.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("id,0,1,2,3\n"));
}

fn probe_set(net: &Network, count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<f32> = (0..count * net.input_len())
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let labels = net
        .forward_batch(&Tensor::new(vec![count, net.input_len()], images.clone()).unwrap())
        .unwrap()
        .predictions();
    Dataset::new(images, labels, net.input_shape().to_vec()).unwrap()
}

#[test]
fn features_of_identity_net_equal_inputs() {
    let mut w = vec![0.0; 9];
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let net = Network::new(
        vec![3],
        vec![Layer::with_params(
            LayerSpec::Dense {
                inputs: 3,
                outputs: 3,
            },
            Tensor::new(vec![3, 3], w).unwrap(),
            Tensor::zeros(vec![3]),
        )
        .unwrap()],
    )
    .unwrap();
    let probe = probe_set(&net, 6, 1);
    let f = extract_features(&net, &probe).unwrap();
    let want: Vec<f64> = probe.images().iter().map(|&v| f64::from(v)).collect();
    assert_eq!(f.data(), want.as_slice());
    assert_eq!(
        extract_features(&net, &probe).unwrap(),
        extract_features(&net.clone(), &probe).unwrap()
    );
    assert!(extract_features(&net, &probe.head(1)).is_err());
}

fn unfiltered(n: usize, ite: usize, mode: SelectionMode) -> GreedyConfig {
    GreedyConfig {
        ite: Some(ite),
        filter: None,
        ..GreedyConfig::new(n, mode)
    }
}

#[test]
fn greedy_without_budget_for_eviction_keeps_first_mutants() {
    let net = Network::mlp(6, &[24, 16], 4, 1).unwrap();
    let probe = probe_set(&net, 64, 2);
    let out = greedy_generate(&net, unfiltered(4, 4, SelectionMode::Diverse), &probe, 11).unwrap();
    assert!(out.complete);
    let iters: Vec<usize> = out.events.iter().map(|e| e.iteration).collect();
    assert_eq!(iters, vec![0, 1, 2, 3]);
    assert!(out.events.iter().all(|e| e.evicted.is_none()));
    let specs: Vec<_> = out.mutants.iter().map(|m| m.spec).collect();
    let planned: Vec<_> = out.events.iter().map(|e| e.spec).collect();
    assert_eq!(specs, planned);

    let single =
        greedy_generate(&net, unfiltered(1, 1, SelectionMode::Diverse), &probe, 11).unwrap();
    assert_eq!(single.mutants.len(), 1);
    assert_eq!(single.mutants[0].spec, out.mutants[0].spec);
}

#[test]
fn greedy_returns_at_most_n_distinct_mutants() {
    let net = Network::mlp(6, &[24, 16], 4, 5).unwrap();
    let probe = probe_set(&net, 64, 6);
    for mode in [
        SelectionMode::Diverse,
        SelectionMode::Similar,
        SelectionMode::Random,
    ] {
        for n in [1, 3, 5] {
            let out =
                greedy_generate(&net, unfiltered(n, 3 * n + 1, mode), &probe, n as u64).unwrap();
            let accepted = out.events.iter().filter(|e| e.accepted).count();
            let evictions = out.events.iter().filter(|e| e.evicted.is_some()).count();
            if mode == SelectionMode::Similar {
                // Similar mode always filters at 95% retention, so some draws are rejected.
                assert!(out.mutants.len() <= n);
                assert_eq!(out.complete, out.mutants.len() == n);
                assert!(out
                    .mutants
                    .iter()
                    .all(|m| m.probe_accuracy.unwrap() >= 0.95 * 1.0));
            } else {
                assert_eq!(out.mutants.len(), n);
            }
            let seeds: HashSet<u64> = out.mutants.iter().map(|m| m.spec.seed).collect();
            assert_eq!(seeds.len(), out.mutants.len());
            assert_eq!(out.similarity.size(), out.mutants.len());
            match mode {
                SelectionMode::Random => assert_eq!(evictions, 0),
                SelectionMode::Diverse => assert_eq!(evictions, 2 * n + 1),
                SelectionMode::Similar => assert_eq!(evictions, accepted.saturating_sub(n)),
            }
        }
    }
}

#[test]
fn greedy_is_deterministic() {
    let net = Network::mlp(6, &[24, 16], 4, 9).unwrap();
    let probe = probe_set(&net, 64, 6);
    let a = greedy_generate(&net, unfiltered(3, 9, SelectionMode::Diverse), &probe, 4).unwrap();
    let b = greedy_generate(&net, unfiltered(3, 9, SelectionMode::Diverse), &probe, 4).unwrap();
    assert_eq!(a.mutants, b.mutants);
    assert_eq!(a.similarity, b.similarity);
}

#[test]
fn greedy_rejects_bad_budget() {
    let net = Network::mlp(6, &[8], 4, 9).unwrap();
    let probe = probe_set(&net, 8, 6);
    assert!(greedy_generate(&net, unfiltered(3, 2, SelectionMode::Diverse), &probe, 0).is_err());
    assert!(greedy_generate(&net, unfiltered(0, 2, SelectionMode::Diverse), &probe, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pagerank_is_a_probability_vector(seed in 0u64..100_000, k in 2usize..=11) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![0.0; k * k];
        for i in 0..k {
            v[i * k + i] = 1.0;
            for j in i + 1..k {
                let s = rng.random_range(0.0..1.0);
                v[i * k + j] = s;
                v[j * k + i] = s;
            }
        }
        let r = pagerank(&sim_from(k, v), PageRankConfig::default()).unwrap();
        prop_assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(r.scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn cka_stays_in_unit_interval(seed in 0u64..100_000, rows in 2usize..30, c1 in 1usize..6, c2 in 1usize..6) {
        let a = random_features(rows, c1, seed);
        let b = random_features(rows, c2, seed ^ 0xabc);
        let s = linear_cka(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-6).contains(&s));
    }
}
