//! Runtime invariant suite behind the `selftest` command. Each check runs a
//! small instance and reports whether the property held.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::exec::Execution;
use crate::generator_agg::{aggregate_generators, average_params, kmeans, normalize_shapley, shapley_exact};
use crate::model_agg::{aggregation_weights, apply_update, fedavg, sample_weights, UpdateDelta};
use crate::models::{ArchConfig, GeneratorParams, ModelParams};
use crate::node::ImputationMode;
use crate::numeric::{finite_difference_check, mlp_specs, softmax_cross_entropy, Mode, Network, Tensor2};
use crate::orchestrator::{rounds_csv, Experiment, ExperimentConfig};
use crate::seed;
use crate::synthdata::{DatasetSpec, ModalitySpec, ScenarioSpec};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn() -> Result<(bool, String)>;

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Runs every check; an error inside a check counts as a failure.
pub fn run_all() -> Vec<Check> {
    let suite: [(&'static str, CheckFn); 7] = [
        ("shapley_axioms", shapley_axioms),
        ("weight_simplex", weight_simplex),
        ("fedavg_reduction", fedavg_reduction),
        ("kmeans_inertia", kmeans_inertia),
        ("network_gradient", network_gradient),
        ("zero_missing_substitution", zero_missing_substitution),
        ("determinism", determinism),
    ];
    suite
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((ok, detail)) => check(name, ok, detail),
            Err(e) => check(name, false, format!("error: {e}")),
        })
        .collect()
}

/// Average marginal contribution over every ordering of the players.
fn permutation_shapley(n: usize, v: &[f64]) -> Vec<f64> {
    fn orderings(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(i);
            for mut tail in orderings(rest) {
                tail.insert(0, head);
                out.push(tail);
            }
        }
        out
    }
    let perms = orderings((0..n).collect());
    let mut phi = vec![0.0; n];
    for p in &perms {
        let mut mask = 0usize;
        for &i in p {
            phi[i] += v[mask | 1 << i] - v[mask];
            mask |= 1 << i;
        }
    }
    phi.iter().map(|s| s / perms.len() as f64).collect()
}

fn shapley_axioms() -> Result<(bool, String)> {
    let mut rng = seed::rng(1, &[0]);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let n = rng.random_range(2..=5);
        let mut v: Vec<f64> = (0..1usize << n).map(|_| rng.random_range(-1.0..1.0)).collect();
        v[0] = 0.0;
        let exact = shapley_exact(n, |s| v[s])?;
        let oracle = permutation_shapley(n, &v);
        worst = exact.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        worst = worst.max((exact.iter().sum::<f64>() - v[(1 << n) - 1]).abs());
    }
    Ok((worst <= 1e-9, format!("max deviation {worst:.3e}")))
}

fn weight_simplex() -> Result<(bool, String)> {
    let mut rng = seed::rng(2, &[0]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=8);
        let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let d: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n: Vec<usize> = (0..k).map(|_| rng.random_range(1..500)).collect();
        let a = aggregation_weights(&p, &d, &n)?;
        if a.iter().any(|&x| x < 0.0) {
            return Ok((false, format!("negative weight in {a:?}")));
        }
        worst = worst.max((a.iter().sum::<f64>() - 1.0).abs());
    }
    let pair = aggregation_weights(&[0.5, 0.5], &[0.1, 0.1], &[1, 3])?;
    Ok((worst <= 1e-12 && pair == [0.25, 0.75], format!("max sum deviation {worst:.3e}, (1,3) -> {pair:?}")))
}

fn fedavg_reduction() -> Result<(bool, String)> {
    let arch = ArchConfig { latent_dim: 4, encoder_hidden: 5, generator_hidden: 5 };
    let mut rng = seed::rng(3, &[0]);
    let models: Vec<ModelParams> =
        (0..4).map(|_| ModelParams::new(&[3, 2], 3, &arch, &mut rng)).collect::<Result<_>>()?;
    let counts = [10, 25, 7, 40];
    let refs: Vec<&ModelParams> = models.iter().collect();
    let avg = fedavg(&refs, &counts)?;
    let deltas: Vec<UpdateDelta> =
        models.iter().zip(counts).enumerate().map(|(i, (m, n))| UpdateDelta::new(i, m, n)).collect();
    let alphas = aggregation_weights(&[0.7; 4], &[0.2; 4], &counts)?;
    let model_ok = alphas == sample_weights(&counts) && apply_update(&models[0], &deltas, &alphas, 1.0)? == avg;

    let gens: Vec<GeneratorParams> =
        (0..3).map(|_| GeneratorParams::new(3, &[4, 4], 5, &mut rng)).collect::<Result<_>>()?;
    let grefs: Vec<&GeneratorParams> = gens.iter().collect();
    let gen_ok = aggregate_generators(&grefs, &normalize_shapley(&[0.3; 3])?)? == average_params(&grefs)?;
    Ok((model_ok && gen_ok, format!("model {model_ok}, generator {gen_ok}")))
}

fn kmeans_inertia() -> Result<(bool, String)> {
    let mut rng = seed::rng(4, &[0]);
    for trial in 0..50 {
        let n = rng.random_range(3..30);
        let k = rng.random_range(1..=n.min(5));
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let res = kmeans(&pts, k, trial, 100)?;
        if res.inertia_history.windows(2).any(|w| w[1] > w[0]) {
            return Ok((false, format!("inertia rose on instance {trial}: {:?}", res.inertia_history)));
        }
    }
    let mut pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.0]).collect();
    pts.shuffle(&mut rng);
    let exact = kmeans(&pts, 6, 9, 100)?;
    let last = exact.inertia_history.last().copied().unwrap_or(0.0);
    Ok((last == 0.0, format!("k = n final inertia {last}")))
}

fn network_gradient() -> Result<(bool, String)> {
    let mut rng = seed::rng(5, &[0]);
    let net = Network::new(&mlp_specs(&[4, 6, 3]), &mut rng)?;
    let x = Tensor2::from_vec(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let labels = [0, 1, 2, 1, 0];
    let (logits, cache) = net.forward(&x, Mode::Train)?;
    let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
    let (_, analytic) = net.backward(&cache, &grad)?;
    let mut params = Vec::new();
    net.write_params(&mut params);
    let mut probe = net.clone();
    let err = finite_difference_check(
        |t| {
            probe.read_params(t).expect("same shape");
            let (out, _) = probe.forward(&x, Mode::Train).expect("forward");
            softmax_cross_entropy(&out, &labels).expect("loss").0
        },
        &params,
        &analytic,
        1e-6,
    );
    Ok((err <= 1e-4, format!("max relative error {err:.3e}")))
}

fn small_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        num_nodes: 3,
        local_epochs: 1,
        rounds: 2,
        clusters: 2,
        batch_size: 8,
        dataset: DatasetSpec {
            num_classes: 3,
            modalities: vec![ModalitySpec { name: "a".into(), dim: 3 }, ModalitySpec { name: "b".into(), dim: 3 }],
            samples_per_class: 30,
            class_separation: 2.0,
            noise_scale: 1.0,
            seed: 0,
        },
        arch: ArchConfig { latent_dim: 4, encoder_hidden: 6, generator_hidden: 6 },
        seed,
        ..ExperimentConfig::default()
    }
}

fn zero_missing_substitution() -> Result<(bool, String)> {
    let base = ExperimentConfig { scenario: ScenarioSpec::uniform(0.0), ..small_config(6) };
    let zero = ExperimentConfig { imputation_mode: ImputationMode::ZeroFill, ..base.clone() };
    let a = rounds_csv(&Experiment::new(&base, Execution::Sequential)?.run()?);
    let b = rounds_csv(&Experiment::new(&zero, Execution::Sequential)?.run()?);
    Ok((a == b, "fedmobile and zero_fill traces at beta = 0".into()))
}

fn determinism() -> Result<(bool, String)> {
    let cfg = small_config(7);
    let a = rounds_csv(&Experiment::new(&cfg, Execution::Sequential)?.run()?);
    let b = rounds_csv(&Experiment::new(&cfg, Execution::Parallel)?.run()?);
    Ok((a == b, "sequential and parallel traces".into()))
}
