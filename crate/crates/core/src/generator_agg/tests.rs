use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numeric::{mlp_specs, sgd_step, softmax_cross_entropy, Layer, Network, OptimizerState};

fn rng(s: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(s)
}

fn gen(seed: u64) -> GeneratorParams {
    GeneratorParams::new(3, &[4, 2], 6, &mut rng(seed)).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Mean marginal contribution over all orderings.
fn permutation_shapley(n: usize, v: &[f64]) -> Vec<f64> {
    let perms = permutations(n);
    let mut phi = vec![0.0; n];
    for p in &perms {
        let mut mask = 0;
        for &i in p {
            phi[i] += v[mask | 1 << i] - v[mask];
            mask |= 1 << i;
        }
    }
    phi.iter().map(|x| x / perms.len() as f64).collect()
}

fn random_game(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..1 << n).map(|_| r.random_range(-1.0..2.0)).collect();
    v[0] = 0.0;
    v
}

#[test]
fn probe_labels_are_balanced() {
    let p = probe_labels(&[0, 1, 2, 3, 1], 4, 7, 0).unwrap();
    assert_eq!(p.len(), 64);
    for c in 0..4 {
        assert_eq!(p.iter().filter(|&&l| l == c).count(), 16);
    }
    assert_eq!(probe_labels(&[0, 1, 2], 3, 7, 0).unwrap().len(), 66);
    assert_eq!(
        probe_labels(&[0, 1, 2, 3], 20, 7, 0).unwrap_err().to_string(),
        "proxy error: proxy has no sample of class 4"
    );
    assert_ne!(p, probe_labels(&[0, 1, 2, 3], 4, 7, 1).unwrap());
}

#[test]
fn embeddings_of_identical_and_zero_generators() {
    let g = gen(1);
    let probe = [0, 1, 2, 0, 1, 2];
    let e = embed_generators(&[(0, &g), (1, &g.clone())], &probe).unwrap();
    assert_eq!(e[0].vector, e[1].vector);
    assert_eq!(e[1].node_id, 1);
    assert_eq!(e[0].vector.len(), 3 * 6);

    let mut z = g.clone();
    for h in &mut z.heads {
        let n = h.num_params();
        h.read_params(&vec![0.0; n]).unwrap();
    }
    assert!(embed_generators(&[(0, &z)], &probe).unwrap()[0].vector.iter().all(|&v| v == 0.0));

    let other = GeneratorParams::new(3, &[4, 3], 6, &mut rng(2)).unwrap();
    assert!(matches!(embed_generators(&[(0, &g), (1, &other)], &probe), Err(Error::Protocol(_))));
}

#[test]
fn embedding_matches_manual_class_means() {
    let g = GeneratorParams::new(2, &[3, 2], 5, &mut rng(3)).unwrap();
    let probe = [1, 0, 1, 1, 0];
    let e = embed_generators(&[(0, &g)], &probe).unwrap().remove(0);
    let z = g.generate(&probe, Mode::Eval).unwrap();
    let mut manual = Vec::new();
    for rows in [vec![1, 4], vec![0, 2, 3]] {
        for b in &z.blocks {
            for j in 0..b.cols() {
                manual.push(rows.iter().map(|&r| b.get(r, j)).sum::<f64>() / rows.len() as f64);
            }
        }
    }
    for (a, b) in e.vector.iter().zip(&manual) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn kmeans_with_one_cluster_per_point() {
    let mut r = rng(4);
    let pts: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let km = kmeans(&pts, 6, 9, 50).unwrap();
    assert_eq!(*km.inertia_history.last().unwrap(), 0.0);
    let mut a = km.assignments.clone();
    a.sort_unstable();
    assert_eq!(a, (0..6).collect::<Vec<_>>());
    assert!(matches!(kmeans(&pts, 7, 9, 50), Err(Error::Cluster(_))));
    assert!(matches!(kmeans(&pts, 0, 9, 50), Err(Error::Cluster(_))));
}

#[test]
fn kmeans_recovers_separated_groups() {
    let mut r = rng(5);
    for trial in 0..10 {
        let mut pts = Vec::new();
        let truth: Vec<usize> = (0..12).map(|i| i % 2).collect();
        for &t in &truth {
            let c = if t == 0 { -10.0 } else { 10.0 };
            pts.push((0..4).map(|_| c + r.random_range(-0.5..0.5)).collect::<Vec<f64>>());
        }
        let km = kmeans(&pts, 2, trial, 50).unwrap();
        let same = km.assignments.iter().zip(&truth).all(|(a, t)| (*a == km.assignments[0]) == (*t == truth[0]));
        assert!(same, "trial {trial}: {:?}", km.assignments);
    }
}

#[test]
fn kmeans_inertia_never_increases() {
    let mut r = rng(6);
    for inst in 0..50 {
        let n = r.random_range(5..40);
        let k = r.random_range(1..=n.min(6));
        let d = r.random_range(1..5);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
        let km = kmeans(&pts, k, inst, 100).unwrap();
        for w in km.inertia_history.windows(2) {
            assert!(w[1] <= w[0], "instance {inst}: {:?}", km.inertia_history);
        }
        let mut sizes = vec![0; k];
        km.assignments.iter().for_each(|&a| sizes[a] += 1);
        assert!(sizes.iter().all(|&s| s > 0));
    }
}

#[test]
fn empty_clusters_are_repaired() {
    // Duplicate points force k-means++ to fall back to an arbitrary seed.
    let pts = vec![vec![0.0], vec![0.0], vec![0.0], vec![5.0]];
    let km = kmeans(&pts, 3, 1, 20).unwrap();
    let mut sizes = [0; 3];
    km.assignments.iter().for_each(|&a| sizes[a] += 1);
    assert!(sizes.iter().all(|&s| s > 0));
}

#[test]
fn averaging_generators() {
    let a = gen(7);
    assert_eq!(average_params(&[&a]).unwrap(), a);
    let mut neg = a.clone();
    neg.load_full_state(&a.full_state().iter().map(|v| -v).collect::<Vec<_>>()).unwrap();
    assert!(average_params(&[&a, &neg]).unwrap().full_state().iter().all(|&v| v == 0.0));

    let (b, c) = (gen(8), gen(9));
    let avg = average_params(&[&a, &b, &c]).unwrap().full_state();
    let (sa, sb, sc) = (a.full_state(), b.full_state(), c.full_state());
    let mut r = rng(10);
    for _ in 0..10 {
        let i = r.random_range(0..avg.len());
        assert!((avg[i] - (sa[i] + sb[i] + sc[i]) / 3.0).abs() < 1e-15);
    }
    let other = GeneratorParams::new(3, &[4, 2], 7, &mut rng(1)).unwrap();
    assert!(matches!(average_params(&[&a, &other]), Err(Error::Protocol(_))));
    assert!(average_params(&[]).is_err());
}

#[test]
fn weighted_aggregation() {
    let reps = [gen(11), gen(12), gen(13)];
    let refs: Vec<&GeneratorParams> = reps.iter().collect();
    let uniform = normalize_shapley(&[0.4, 0.4, 0.4]).unwrap();
    assert_eq!(aggregate_generators(&refs, &uniform).unwrap(), average_params(&refs).unwrap());
    assert_eq!(aggregate_generators(&refs, &[0.0, 1.0, 0.0]).unwrap(), reps[1]);

    let two = aggregate_generators(&refs[..2], &[0.75, 0.25]).unwrap().full_state();
    let (s0, s1) = (reps[0].full_state(), reps[1].full_state());
    for i in [0, 5, 17, two.len() - 1] {
        assert!((two[i] - (0.75 * s0[i] + 0.25 * s1[i])).abs() < 1e-15);
    }
}

/// A model whose fusion head is trained to classify `g`'s eval-mode latents.
fn head_fitted_to(g: &GeneratorParams, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let encoders = g.latent_dims().iter().map(|&d| Network::new(&mlp_specs(&[3, 5, d]), &mut r).unwrap()).collect();
    let head = Network::new(&mlp_specs(&[g.latent_dims().iter().sum(), 3]), &mut r).unwrap();
    let mut m = ModelParams::from_parts(encoders, head).unwrap();
    let labels = [0, 1, 2];
    let x = g.generate(&labels, Mode::Eval).unwrap().fused();
    let mut opt = OptimizerState::new(0.5, 0.9, 0.0, m.fusion_head.num_params()).unwrap();
    for _ in 0..500 {
        let (logits, cache) = m.fusion_head.forward(&x, Mode::Train).unwrap();
        let (_, d) = softmax_cross_entropy(&logits, &labels).unwrap();
        let grad = m.fusion_head.backward(&cache, &d).unwrap().1;
        let mut theta = Vec::new();
        m.fusion_head.write_params(&mut theta);
        sgd_step(&mut theta, &grad, &mut opt).unwrap();
        m.fusion_head.read_params(&theta).unwrap();
    }
    m
}

#[test]
fn coalition_values_cases() {
    let reps = vec![gen(14), gen(15), gen(16)];
    let model = head_fitted_to(&reps[0], 1);
    let probe = [0, 1, 2, 2, 1, 0];
    assert_eq!(coalition_value(0, &reps, &model, &probe).unwrap(), 0.0);
    assert_eq!(coalition_value(1, &reps, &model, &probe).unwrap(), 1.0);
    let seq = coalition_values(&reps, &model, &probe, Execution::Sequential).unwrap();
    assert_eq!(seq.len(), 8);
    assert!(seq.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(seq, coalition_values(&reps, &model, &probe, Execution::Parallel).unwrap());
}

#[test]
fn shapley_textbook_games() {
    let additive = shapley_exact(3, |s| s.count_ones() as f64).unwrap();
    for p in additive {
        assert!((p - 1.0).abs() < 1e-15);
    }
    let dictator = shapley_exact(4, |s| (s & 1) as f64).unwrap();
    assert_eq!(dictator, vec![1.0, 0.0, 0.0, 0.0]);
    assert!(matches!(shapley_exact(17, |_| 0.0), Err(Error::Size(17))));
    assert!(shapley_from_table(2, &[0.0; 3]).is_err());
}

#[test]
fn shapley_matches_permutation_oracle_and_axioms() {
    let mut r = rng(17);
    for trial in 0..30 {
        let n = 2 + trial % 4;
        let v = random_game(n, &mut r);
        let phi = shapley_from_table(n, &v).unwrap();
        let oracle = permutation_shapley(n, &v);
        for (a, b) in phi.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9);
        }
        let total: f64 = phi.iter().sum();
        assert!((total - (v[(1 << n) - 1] - v[0])).abs() <= 1e-9);
    }
}

#[test]
fn shapley_symmetry_and_dummy() {
    let mut r = rng(18);
    for _ in 0..10 {
        // Players 0 and 1 are interchangeable; player 3 adds nothing.
        let base: Vec<f64> = (0..8).map(|_| r.random_range(0.0..1.0)).collect();
        let v = |s: usize| {
            if s & 0b0111 == 0 {
                return 0.0;
            }
            let ones = (s & 1) + (s >> 1 & 1);
            base[ones * 2 + (s >> 2 & 1)]
        };
        let phi = shapley_exact(4, v).unwrap();
        assert!((phi[0] - phi[1]).abs() <= 1e-12);
        assert_eq!(phi[3], 0.0);
    }
}

#[test]
fn normalization_examples() {
    let w = normalize_shapley(&[1.0; 5]).unwrap();
    assert_eq!(w, vec![0.2; 5]);
    let w = normalize_shapley(&[3.0, 1.0, 0.0]).unwrap();
    assert!((w[0] - 0.75).abs() < 1e-8 && (w[1] - 0.25).abs() < 1e-8 && w[2] < 1e-8 && w[2] > 0.0);
    let w = normalize_shapley(&[0.5, -0.2, 0.1]).unwrap();
    assert!(w.iter().all(|&x| x >= 0.0));
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert!(normalize_shapley(&[f64::NAN, 1.0]).is_err());
    assert!(normalize_shapley(&[]).is_err());
}

#[test]
fn one_node_per_cluster_keeps_uploads() {
    let gens = [gen(20), gen(21), gen(22)];
    let uploads: Vec<(usize, &GeneratorParams)> = gens.iter().enumerate().collect();
    let probe = probe_labels(&[0, 1, 2], 3, 1, 0).unwrap();
    let cl = cluster_generators(&uploads, &probe, 3, 5, 20).unwrap();
    for (node, &c) in &cl.assignments {
        assert_eq!(cl.representatives[c], gens[*node]);
    }
}

#[test]
fn shapley_record_round_trips_through_json() {
    let gens = [gen(23), gen(24), gen(25), gen(26)];
    let uploads: Vec<(usize, &GeneratorParams)> = gens.iter().enumerate().collect();
    let model = head_fitted_to(&gens[0], 2);
    let probe = probe_labels(&[0, 1, 2], 3, 1, 0).unwrap();
    let (global, cl, sv) =
        clustered_shapley_aggregate(&uploads, &model, &probe, 2, 3, 20, Execution::Sequential).unwrap();
    assert_eq!(sv.coalition_values.len(), 4);
    assert!((sv.normalized_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let refs: Vec<&GeneratorParams> = cl.representatives.iter().collect();
    assert_eq!(global, aggregate_generators(&refs, &sv.normalized_weights).unwrap());
    let rec = ShapleyRecord::new(4, &cl, &sv);
    let text = serde_json::to_string(&rec).unwrap();
    assert!(text.contains("\"coalition_values\":{\"0\":0.0,"));
    assert_eq!(serde_json::from_str::<ShapleyRecord>(&text).unwrap(), rec);
}

proptest! {
    #[test]
    fn normalized_weights_lie_on_simplex(phi in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let w = normalize_shapley(&phi).unwrap();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn efficiency_holds(values in prop::collection::vec(-3.0f64..3.0, 16)) {
        let mut v = values;
        v[0] = 0.0;
        let phi = shapley_from_table(4, &v).unwrap();
        prop_assert!((phi.iter().sum::<f64>() - v[15]).abs() <= 1e-9);
    }
}

#[test]
fn averaging_includes_running_statistics() {
    let a = gen(30);
    let mut b = a.clone();
    if let Layer::Batchnorm { running_mean, .. } = &mut b.trunk.layers[1] {
        running_mean[0] = 2.0;
    }
    let avg = average_params(&[&a, &b]).unwrap();
    match &avg.trunk.layers[1] {
        Layer::Batchnorm { running_mean, .. } => assert_eq!(running_mean[0], 1.0),
        _ => unreachable!(),
    }
}
