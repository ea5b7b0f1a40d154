//! The round loop: broadcast, local training, generator aggregation, model
//! aggregation and evaluation, plus configuration and metric files.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::generator_agg::{average_params, clustered_shapley_aggregate, probe_labels, ShapleyRecord};
use crate::model_agg::{
    apply_update, contribution_reports, contribution_rows, fedavg, sample_weights, ContributionMode,
    ContributionReport, UpdateDelta, CONTRIBUTIONS_HEADER,
};
use crate::models::{evaluate_complete, ArchConfig, GeneratorParams, ModelParams};
use crate::node::{ImputationMode, LocalLossBreakdown, LocalUpdate, LossWeights, NodeState, OptimSettings};
use crate::seed::{self, tag};
use crate::synthdata::{
    apply_missingness, make_proxy, make_synthetic_dataset, partition, split_holdout, DatasetSpec, ModalitySpec,
    MultimodalDataset, PartitionScheme, ScenarioSpec,
};
use crate::textio::{fmt_f64, io_err};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Contribution-weighted update of the global model.
    #[default]
    Fedmobile,
    /// Sample-count weighted average of the local models.
    Fedavg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorAggMode {
    #[default]
    ClusteredSv,
    PlainAvg,
    /// No generator aggregation; every node keeps its own generator.
    Off,
}

/// Everything needed to reproduce a run. Missing keys take the defaults
/// below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub num_nodes: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    pub participation: f64,
    pub clusters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub server_eta: f64,
    pub scenario: ScenarioSpec,
    pub imputation_mode: ImputationMode,
    pub aggregation_mode: AggregationMode,
    pub generator_agg_mode: GeneratorAggMode,
    pub contribution_mode: ContributionMode,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub proxy_fraction: f64,
    pub partition_scheme: PartitionScheme,
    pub arch: ArchConfig,
    pub loss_weights: LossWeights,
    pub kmeans_max_iters: usize,
    /// When false, the `seconds` column is written as 0 so output files
    /// are byte-identical across runs.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_nodes: 10,
            local_epochs: 5,
            rounds: 100,
            participation: 1.0,
            clusters: 5,
            batch_size: 16,
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            server_eta: 1.0,
            scenario: ScenarioSpec::uniform(0.6),
            imputation_mode: ImputationMode::Fedmobile,
            aggregation_mode: AggregationMode::Fedmobile,
            generator_agg_mode: GeneratorAggMode::ClusteredSv,
            contribution_mode: ContributionMode::LossProxy,
            dataset: reference_dataset(&[8, 8]),
            seed: 0,
            holdout_fraction: 0.3,
            proxy_fraction: 0.2,
            partition_scheme: PartitionScheme::Iid,
            arch: ArchConfig::default(),
            loss_weights: LossWeights::default(),
            kmeans_max_iters: 100,
            record_timing: false,
        }
    }
}

/// Four classes with the given modality widths, sized so ten nodes hold
/// about 200 samples each after a 30% hold-out.
pub fn reference_dataset(dims: &[usize]) -> DatasetSpec {
    DatasetSpec {
        num_classes: 4,
        modalities: dims.iter().enumerate().map(|(i, &dim)| ModalitySpec { name: format!("m{i}"), dim }).collect(),
        samples_per_class: 715,
        class_separation: 4.0,
        noise_scale: 1.0,
        seed: 0,
    }
}

impl ExperimentConfig {
    /// The desk-scale reference setting at missing rate `beta`.
    pub fn reference(beta: f64, seed: u64) -> Self {
        Self { rounds: 50, scenario: ScenarioSpec::uniform(beta), seed, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must lie in (0, 1], got {}", self.participation));
        }
        for (name, v) in [
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("num_nodes", self.num_nodes),
            ("clusters", self.clusters),
            ("batch_size", self.batch_size),
            ("kmeans_max_iters", self.kmeans_max_iters),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.clusters > self.num_nodes {
            return bad(format!("clusters {} exceeds num_nodes {}", self.clusters, self.num_nodes));
        }
        if !(0.0..=1.0).contains(&self.server_eta) {
            return bad(format!("server_eta must lie in [0, 1], got {}", self.server_eta));
        }
        self.dataset.validate()?;
        self.scenario.validate(self.dataset.modalities.len(), self.num_nodes)?;
        Ok(())
    }

    /// Number of nodes drawn each round, `⌈q·K⌉`.
    pub fn nodes_per_round(&self) -> usize {
        ((self.participation * self.num_nodes as f64).ceil() as usize).clamp(1, self.num_nodes)
    }

    fn optim(&self) -> OptimSettings {
        OptimSettings { learning_rate: self.learning_rate, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

/// How often each server-side code path ran during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CallCounters {
    pub shapley: usize,
    pub contribution: usize,
    pub plain_generator_average: usize,
    pub fedavg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Last-epoch loss breakdown per participating node.
    pub node_losses: Vec<(usize, LocalLossBreakdown)>,
    pub shapley: Option<ShapleyRecord>,
    pub contributions: Vec<ContributionReport>,
    pub seconds: f64,
}

/// Accuracy and mean cross entropy of the global model on complete data.
pub fn evaluate(model: &ModelParams, test: &MultimodalDataset) -> Result<(f64, f64)> {
    evaluate_complete(model, test)
}

/// A prepared run: data is split, nodes are masked and initialized.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub nodes: Vec<NodeState>,
    pub proxy: MultimodalDataset,
    pub test: MultimodalDataset,
    pub global_model: ModelParams,
    pub global_generator: GeneratorParams,
    pub counters: CallCounters,
    exec: Execution,
}

impl Experiment {
    pub fn new(config: &ExperimentConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        let master = config.seed;
        config.dataset.seed = master;

        let full = make_synthetic_dataset(&config.dataset)?;
        let (pool, held) = split_holdout(&full, config.holdout_fraction, master)?;
        let (proxy, test) = make_proxy(&held, config.proxy_fraction, master)?;
        let parts = partition(&pool, config.num_nodes, config.partition_scheme, master)?;

        let dims = full.modality_dims();
        let classes = full.num_classes;
        let global_model = ModelParams::new(&dims, classes, &config.arch, &mut seed::rng(master, &[tag::INIT_MODEL]))?;
        let global_generator = GeneratorParams::new(
            classes,
            &global_model.latent_dims(),
            config.arch.generator_hidden,
            &mut seed::rng(master, &[tag::INIT_GENERATOR]),
        )?;
        let nodes = parts
            .iter()
            .enumerate()
            .map(|(k, part)| {
                NodeState::new(
                    k,
                    apply_missingness(part, &config.scenario, k, master)?,
                    global_model.clone(),
                    global_generator.clone(),
                    config.optim(),
                    config.imputation_mode,
                    config.loss_weights,
                    master,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        info!(
            "{} nodes, {} proxy samples, {} test samples, {} model parameters",
            nodes.len(),
            proxy.len(),
            test.len(),
            global_model.num_params()
        );
        Ok(Self { config, nodes, proxy, test, global_model, global_generator, counters: CallCounters::default(), exec })
    }

    /// Node ids drawn for `round`, uniformly without replacement, ascending.
    pub fn select_nodes(&self, round: usize) -> Vec<usize> {
        let k = self.config.num_nodes;
        let m = self.config.nodes_per_round();
        if m == k {
            return (0..k).collect();
        }
        let mut ids = index::sample(&mut seed::rng(self.config.seed, &[tag::SELECT, round as u64]), k, m).into_vec();
        ids.sort_unstable();
        ids
    }

    pub fn run_round(&mut self, round: usize) -> Result<RoundMetrics> {
        let wrap = |e: Error| Error::Round { round, source: Box::new(e) };
        self.round_inner(round).map_err(wrap)
    }

    fn round_inner(&mut self, round: usize) -> Result<RoundMetrics> {
        let start = Instant::now();
        let cfg = &self.config;
        let selected = self.select_nodes(round);
        let broadcast_generator = (cfg.generator_agg_mode != GeneratorAggMode::Off).then_some(&self.global_generator);
        let global_model = &self.global_model;
        let (epochs, batch) = (cfg.local_epochs, cfg.batch_size);
        let active: Vec<&mut NodeState> =
            self.nodes.iter_mut().filter(|n| selected.binary_search(&n.node_id).is_ok()).collect();
        let updates: Vec<LocalUpdate> = exec::map(self.exec, active, |node| {
            node.local_train(global_model, broadcast_generator, epochs, batch, round)
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let shapley = self.aggregate_generators(&updates, round)?;
        let contributions = self.aggregate_models(&updates)?;

        let (test_accuracy, test_loss) = evaluate(&self.global_model, &self.test)?;
        let seconds = if self.config.record_timing { start.elapsed().as_secs_f64() } else { 0.0 };
        debug!("round {round}: accuracy {test_accuracy:.4}, loss {test_loss:.4}");
        Ok(RoundMetrics {
            round,
            test_accuracy,
            test_loss,
            node_losses: updates.iter().map(|u| (u.node_id, u.history.last().copied().unwrap_or_default())).collect(),
            shapley,
            contributions,
            seconds,
        })
    }

    /// Updates the global generator from the uploads. The coalition game is
    /// scored with the round's incoming global model.
    fn aggregate_generators(&mut self, updates: &[LocalUpdate], round: usize) -> Result<Option<ShapleyRecord>> {
        let cfg = &self.config;
        match cfg.generator_agg_mode {
            GeneratorAggMode::Off => Ok(None),
            GeneratorAggMode::PlainAvg => {
                self.counters.plain_generator_average += 1;
                let gens: Vec<&GeneratorParams> = updates.iter().map(|u| &u.generator).collect();
                self.global_generator = average_params(&gens)?;
                Ok(None)
            }
            GeneratorAggMode::ClusteredSv => {
                self.counters.shapley += 1;
                let probe = probe_labels(&self.proxy.labels, self.proxy.num_classes, cfg.seed, round)?;
                let gens: Vec<(usize, &GeneratorParams)> = updates.iter().map(|u| (u.node_id, &u.generator)).collect();
                let k = cfg.clusters.min(gens.len());
                let kmeans_seed = seed::derive(cfg.seed, &[tag::KMEANS, round as u64]);
                let (global, clusters, shapley) = clustered_shapley_aggregate(
                    &gens,
                    &self.global_model,
                    &probe,
                    k,
                    kmeans_seed,
                    cfg.kmeans_max_iters,
                    self.exec,
                )?;
                self.global_generator = global;
                Ok(Some(ShapleyRecord::new(round, &clusters, &shapley)))
            }
        }
    }

    fn aggregate_models(&mut self, updates: &[LocalUpdate]) -> Result<Vec<ContributionReport>> {
        let cfg = &self.config;
        let n_k: Vec<usize> = updates.iter().map(|u| u.n_k).collect();
        match cfg.aggregation_mode {
            AggregationMode::Fedavg => {
                self.counters.fedavg += 1;
                let models: Vec<&ModelParams> = updates.iter().map(|u| &u.model).collect();
                self.global_model = fedavg(&models, &n_k)?;
                Ok(updates
                    .iter()
                    .zip(sample_weights(&n_k))
                    .map(|(u, alpha)| ContributionReport {
                        node_id: u.node_id,
                        p_local: None,
                        delta_p_global: None,
                        delta_loss: None,
                        n_k: u.n_k,
                        alpha,
                    })
                    .collect())
            }
            AggregationMode::Fedmobile => {
                if cfg.contribution_mode != ContributionMode::Off {
                    self.counters.contribution += 1;
                }
                let locals: Vec<(usize, &ModelParams, usize)> =
                    updates.iter().map(|u| (u.node_id, &u.model, u.n_k)).collect();
                let reports = contribution_reports(
                    &self.global_model,
                    &locals,
                    &self.proxy,
                    cfg.contribution_mode,
                    cfg.server_eta,
                    self.exec,
                )?;
                let deltas: Vec<UpdateDelta> =
                    updates.iter().map(|u| UpdateDelta::new(u.node_id, &u.model, u.n_k)).collect();
                let alphas: Vec<f64> = reports.iter().map(|r| r.alpha).collect();
                self.global_model = apply_update(&self.global_model, &deltas, &alphas, cfg.server_eta)?;
                Ok(reports)
            }
        }
    }

    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        (1..=self.config.rounds)
            .map(|r| {
                let m = self.run_round(r)?;
                info!("round {r}/{}: test accuracy {:.4}", self.config.rounds, m.test_accuracy);
                Ok(m)
            })
            .collect()
    }
}

/// Runs every round of `config` with the default execution mode.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    Experiment::new(config, Execution::default())?.run()
}

pub const ROUNDS_HEADER: &str = "round,test_accuracy,test_loss,seconds";

pub fn rounds_csv(metrics: &[RoundMetrics]) -> String {
    let mut s = format!("{ROUNDS_HEADER}\n");
    for m in metrics {
        s.push_str(&format!(
            "{},{},{},{}\n",
            m.round,
            fmt_f64(m.test_accuracy),
            fmt_f64(m.test_loss),
            fmt_f64(m.seconds)
        ));
    }
    s
}

pub fn contributions_csv(metrics: &[RoundMetrics]) -> String {
    let mut s = format!("{CONTRIBUTIONS_HEADER}\n");
    for m in metrics {
        s.push_str(&contribution_rows(m.round, &m.contributions));
    }
    s
}

pub fn shapley_json(metrics: &[RoundMetrics]) -> String {
    let records: Vec<&ShapleyRecord> = metrics.iter().filter_map(|m| m.shapley.as_ref()).collect();
    serde_json::to_string_pretty(&records).expect("records serialize")
}

/// Writes `rounds.csv`, `contributions.csv`, `shapley.json` and `config.json`.
pub fn write_metrics(metrics: &[RoundMetrics], config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let files = [
        ("rounds.csv", rounds_csv(metrics)),
        ("contributions.csv", contributions_csv(metrics)),
        ("shapley.json", shapley_json(metrics)),
        ("config.json", config.to_json()),
    ];
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}
