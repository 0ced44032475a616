//! Decentralized round engine: topology, per-node state, model exchange and
//! aggregation.
//!
//! A round is: every node trains from its current model, then every node
//! averages the models of itself and its neighbours, then every node
//! evaluates. Per-node work may run on several threads; results are
//! collected into node-id order before anything is reduced, so the outcome
//! does not depend on the thread count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ExperimentConfig, TopologyConfig};
use crate::datahub::{
    dirichlet_partition_of, global_holdout, iid_partition_of, load_idx_dataset, local_splits, make_synthetic, Dataset,
    NodeSplit,
};
use crate::distfit::{pretrain_distribution_fitting, FitConfig, FittedDistribution};
use crate::learner::{evaluate, train_local, EvalReport, ModelWeights, TrainConfig};
use crate::numkit::Rng;
use crate::pooling::{pool_neighbourhood, PoolingConfig, PoolingWeights};
use crate::{Error, Result};

/// Tolerance on the sum of aggregation weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    FedAvg,
    FedProx,
    FedEp,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::FedAvg => "fedavg",
            Aggregator::FedProx => "fedprox",
            Aggregator::FedEp => "fedep",
        }
    }
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Aggregator::FedAvg),
            "fedprox" => Ok(Aggregator::FedProx),
            "fedep" => Ok(Aggregator::FedEp),
            other => Err(Error::invalid(format!("unknown aggregator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    FullyConnected,
    Ring,
    Custom,
}

/// Undirected overlay without self-loops in which every node has a neighbour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    kind: TopologyKind,
    adjacency: Vec<Vec<bool>>,
}

impl Topology {
    pub fn fully_connected(n_nodes: usize) -> Result<Self> {
        check_size(n_nodes)?;
        let adjacency = (0..n_nodes).map(|i| (0..n_nodes).map(|j| i != j).collect()).collect();
        Ok(Self {
            kind: TopologyKind::FullyConnected,
            adjacency,
        })
    }

    /// Node `i` is linked to `i ± 1 mod n`.
    #[allow(clippy::needless_range_loop)]
    pub fn ring(n_nodes: usize) -> Result<Self> {
        check_size(n_nodes)?;
        let mut adjacency = vec![vec![false; n_nodes]; n_nodes];
        for i in 0..n_nodes {
            let j = (i + 1) % n_nodes;
            adjacency[i][j] = true;
            adjacency[j][i] = true;
        }
        Ok(Self {
            kind: TopologyKind::Ring,
            adjacency,
        })
    }

    pub fn custom(adjacency: Vec<Vec<bool>>) -> Result<Self> {
        let n = adjacency.len();
        check_size(n)?;
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Topology(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row[i] {
                return Err(Error::Topology(format!("self-loop at node {i}")));
            }
            if !row.iter().any(|&b| b) {
                return Err(Error::Topology(format!("node {i} has no neighbours")));
            }
            if let Some(j) = (0..n).find(|&j| row[j] != adjacency[j][i]) {
                return Err(Error::Topology(format!("edge {i}-{j} is not symmetric")));
            }
        }
        Ok(Self {
            kind: TopologyKind::Custom,
            adjacency,
        })
    }

    pub fn from_config(config: &TopologyConfig, n_nodes: usize) -> Result<Self> {
        match config {
            TopologyConfig::FullyConnected => Self::fully_connected(n_nodes),
            TopologyConfig::Ring => Self::ring(n_nodes),
            TopologyConfig::Custom(adj) => {
                if adj.len() != n_nodes {
                    return Err(Error::Topology(format!("{} rows for {n_nodes} nodes", adj.len())));
                }
                Self::custom(adj.clone())
            }
        }
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn are_neighbours(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn neighbours(&self, node: usize) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&j| self.adjacency[node][j]).collect()
    }

    /// The node and its neighbours in ascending id order.
    pub fn neighbourhood(&self, node: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&j| j == node || self.adjacency[node][j])
            .collect()
    }
}

fn check_size(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Topology(format!("need at least 2 nodes, got {n}")));
    }
    Ok(())
}

/// Everything one node owns.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    pub weights: ModelWeights,
    pub split: NodeSplit,
    /// Own fitted label distribution, once fitted.
    pub fit: Option<FittedDistribution>,
    /// Distributions received from the neighbourhood, self included.
    pub cache: BTreeMap<usize, FittedDistribution>,
    /// Attention over [`Topology::neighbourhood`], computed once.
    pub pooling: Option<PoolingWeights>,
    pub rng: Rng,
}

impl NodeState {
    pub fn new(id: usize, weights: ModelWeights, split: NodeSplit, rng: Rng) -> Self {
        Self {
            id,
            weights,
            split,
            fit: None,
            cache: BTreeMap::new(),
            pooling: None,
            rng,
        }
    }

    pub fn n_train(&self) -> usize {
        self.split.train.len()
    }
}

/// Fit each node's training-label distribution. A node whose fit fails falls
/// back to its empirical histogram.
pub fn fit_local_distributions(
    states: &mut [NodeState],
    dataset: &Dataset,
    config: &FitConfig,
    seed: u64,
) -> Result<()> {
    config.validate()?;
    let fits: Vec<Result<FittedDistribution>> = states
        .par_iter()
        .map(|s| {
            let labels: Vec<usize> = s.split.train.iter().map(|&i| dataset.labels()[i]).collect();
            let mut rng = Rng::derive(seed, s.id as u64, "fit");
            match pretrain_distribution_fitting(&labels, dataset.n_classes(), config, &mut rng) {
                Ok(fit) => Ok(fit),
                Err(e) => {
                    warn!("node {}: fit failed ({e}), using label histogram", s.id);
                    FittedDistribution::from_histogram(&labels, dataset.n_classes(), config.variance_floor).map_err(
                        |e| Error::Node {
                            node: s.id,
                            source: Box::new(e),
                        },
                    )
                }
            }
        })
        .collect();
    for (s, fit) in states.iter_mut().zip(fits) {
        s.fit = Some(fit?);
    }
    Ok(())
}

/// Send every node's fitted distribution to its neighbours. Distributions
/// travel as JSON, as they would between separate processes.
pub fn phase1_exchange(states: &mut [NodeState], topology: &Topology) -> Result<()> {
    if states.len() != topology.n_nodes() {
        return Err(Error::Consistency(format!(
            "{} nodes but topology has {}",
            states.len(),
            topology.n_nodes()
        )));
    }
    let wire = states
        .iter()
        .map(|s| {
            s.fit
                .as_ref()
                .ok_or_else(|| Error::Node {
                    node: s.id,
                    source: Box::new(Error::Fit("distribution not fitted before exchange".into())),
                })
                .and_then(FittedDistribution::to_json)
        })
        .collect::<Result<Vec<String>>>()?;
    for s in states.iter_mut() {
        s.cache.clear();
        for j in topology.neighbourhood(s.id) {
            s.cache.insert(j, FittedDistribution::from_json(&wire[j])?);
        }
    }
    Ok(())
}

/// Attention weights for every node over its own cache.
pub fn compute_pooling(states: &mut [NodeState], config: &PoolingConfig) -> Result<()> {
    for s in states.iter_mut() {
        let fits: Vec<FittedDistribution> = s.cache.values().cloned().collect();
        let weights = pool_neighbourhood(&fits, config).map_err(|e| Error::Node {
            node: s.id,
            source: Box::new(e),
        })?;
        debug!("node {} attention {:?}", s.id, weights.alpha);
        s.pooling = Some(weights);
    }
    Ok(())
}

/// `Σ_k c_k · w_k`, accumulated in f64 and clamped to the per-parameter
/// input range.
pub fn weighted_average(models: &[&ModelWeights], coefficients: &[f64]) -> Result<ModelWeights> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate zero models"))?;
    if models.len() != coefficients.len() {
        return Err(Error::Consistency(format!(
            "{} models but {} coefficients",
            models.len(),
            coefficients.len()
        )));
    }
    if models.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::Consistency("models have different shapes".into()));
    }
    if coefficients.iter().any(|&c| !(c >= 0.0)) {
        return Err(Error::Consistency("aggregation weights must be non-negative".into()));
    }
    let sum: f64 = coefficients.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::Consistency(format!("aggregation weights sum to {sum}")));
    }
    let params = (0..first.len())
        .map(|i| {
            let mut acc = 0.0f64;
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for (m, &c) in models.iter().zip(coefficients) {
                let v = m.params()[i];
                acc += c * f64::from(v);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (acc as f32).clamp(lo, hi)
        })
        .collect();
    ModelWeights::new(first.layers().to_vec(), params)
}

/// Size-weighted mean, `α_k = N_k / Σ N_j`.
pub fn aggregate_fedavg(models: &[&ModelWeights], sizes: &[usize]) -> Result<ModelWeights> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Consistency("total sample count is zero".into()));
    }
    let coefficients: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    weighted_average(models, &coefficients)
}

/// Mean weighted by pooled attention coefficients.
pub fn aggregate_fedep(models: &[&ModelWeights], weights: &PoolingWeights) -> Result<ModelWeights> {
    weighted_average(models, &weights.alpha)
}

/// Per-round outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub reports: Vec<EvalReport>,
    /// Each node's attention vector over its neighbourhood (FedEP only).
    pub alphas: Vec<Option<Vec<f64>>>,
    pub duration_ms: f64,
}

impl RoundRecord {
    pub fn mean_f1(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.macro_f1))
    }

    pub fn std_f1(&self) -> f64 {
        let m = self.mean_f1();
        let var = mean(self.reports.iter().map(|r| (r.macro_f1 - m).powi(2)));
        var.sqrt()
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    values.sum::<f64>() / n as f64
}

/// One synchronous round: local training, neighbourhood aggregation,
/// evaluation. On error no node state is modified.
pub fn run_round(
    states: &mut [NodeState],
    topology: &Topology,
    aggregator: Aggregator,
    train: &TrainConfig,
    dataset: &Dataset,
    round: usize,
) -> Result<RoundRecord> {
    let start = Instant::now();
    if aggregator == Aggregator::FedEp {
        if let Some(s) = states.iter().find(|s| s.pooling.is_none()) {
            return Err(Error::Node {
                node: s.id,
                source: Box::new(Error::Consistency(
                    "pooling weights missing; run the exchange first".into(),
                )),
            });
        }
    }
    let mut rngs: Vec<Rng> = states.iter().map(|s| s.rng.clone()).collect();
    let trained: Vec<ModelWeights> = states
        .par_iter()
        .zip(rngs.par_iter_mut())
        .map(|(s, rng)| {
            train_local(&s.weights, dataset, &s.split.train, train, rng, &s.weights)
                .map(|u| u.weights)
                .map_err(|e| Error::Node {
                    node: s.id,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;

    // barrier: all local models exist before anyone aggregates
    let aggregated: Vec<ModelWeights> = states
        .par_iter()
        .map(|s| {
            let hood = topology.neighbourhood(s.id);
            let models: Vec<&ModelWeights> = hood.iter().map(|&j| &trained[j]).collect();
            let out = match aggregator {
                Aggregator::FedAvg | Aggregator::FedProx => {
                    let sizes: Vec<usize> = hood.iter().map(|&j| states[j].n_train()).collect();
                    aggregate_fedavg(&models, &sizes)
                }
                Aggregator::FedEp => aggregate_fedep(&models, s.pooling.as_ref().expect("checked above")),
            };
            out.map_err(|e| Error::Node {
                node: s.id,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let reports: Vec<EvalReport> = states
        .par_iter()
        .zip(&aggregated)
        .map(|(s, w)| {
            evaluate(w, dataset, &s.split.test).map_err(|e| Error::Node {
                node: s.id,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let alphas = states
        .iter()
        .map(|s| match aggregator {
            Aggregator::FedEp => s.pooling.as_ref().map(|p| p.alpha.clone()),
            _ => None,
        })
        .collect();
    for ((s, w), rng) in states.iter_mut().zip(aggregated).zip(rngs) {
        s.weights = w;
        s.rng = rng;
    }
    Ok(RoundRecord {
        round,
        reports,
        alphas,
        duration_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Build the dataset described by `config`.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetConfig::Synthetic(s) => make_synthetic(
            &mut Rng::derive(config.seed, 0, "dataset"),
            s.n_classes,
            s.n_per_class,
            s.n_features,
            s.spread,
        ),
        DatasetConfig::Idx(idx) => {
            let data = load_idx_dataset(&idx.images, &idx.labels)?;
            match idx.max_samples {
                Some(n) if n < data.len() => data.truncated(n),
                _ => Ok(data),
            }
        }
    }
}

/// A configured federation that can be advanced round by round.
pub struct Simulation {
    config: ExperimentConfig,
    dataset: Dataset,
    topology: Topology,
    train: TrainConfig,
    states: Vec<NodeState>,
    initial: ModelWeights,
    round: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = load_dataset(config)?;
        Self::with_dataset(config, dataset)
    }

    /// Like [`Simulation::new`] with the dataset supplied by the caller.
    pub fn with_dataset(config: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let pool = match config.workers {
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
            ),
            None => None,
        };
        let seed = config.seed;
        let n = config.n_nodes;
        let topology = Topology::from_config(&config.topology, n)?;

        let (pool_idx, global_test) = if config.flags.global_test_set {
            let (train, test) = global_holdout(&mut Rng::derive(seed, 0, "holdout"), &dataset, config.test_fraction)?;
            (train, Some(test))
        } else {
            ((0..dataset.len()).collect(), None)
        };
        let mut part_rng = Rng::derive(seed, 0, "partition");
        let partition = match config.partition.spec(n)? {
            Some(spec) => dirichlet_partition_of(&mut part_rng, &dataset, &pool_idx, &spec)?,
            None => iid_partition_of(&mut part_rng, &dataset, &pool_idx, n)?,
        };
        let splits = match global_test {
            Some(test) => partition
                .assignments()
                .iter()
                .map(|a| NodeSplit {
                    train: a.clone(),
                    test: test.clone(),
                })
                .collect(),
            None => local_splits(&dataset, &partition, config.test_fraction)?,
        };
        if let Some(k) = splits.iter().position(|s| s.train.is_empty() || s.test.is_empty()) {
            return Err(Error::Node {
                node: k,
                source: Box::new(Error::Partition("node has no training or test samples".into())),
            });
        }

        let layers = ModelWeights::mlp_layers(dataset.n_features(), &config.hidden, dataset.n_classes());
        let initial = ModelWeights::init(layers, &mut Rng::derive(seed, 0, "init"))?;
        let states: Vec<NodeState> = splits
            .into_iter()
            .enumerate()
            .map(|(k, split)| NodeState::new(k, initial.clone(), split, Rng::derive(seed, k as u64, "train")))
            .collect();

        let mut sim = Self {
            config: config.clone(),
            dataset,
            topology,
            train: config.train_config(),
            states,
            initial,
            round: 0,
            pool,
        };
        if config.aggregator == Aggregator::FedEp {
            sim.install(|s| {
                fit_local_distributions(&mut s.states, &s.dataset, &s.config.fit_config(), s.config.seed)?;
                phase1_exchange(&mut s.states, &s.topology)?;
                compute_pooling(&mut s.states, &s.config.pooling_config())
            })?;
        }
        Ok(sim)
    }

    fn install<R: Send>(&mut self, f: impl FnOnce(&mut Self) -> R + Send) -> R {
        match self.pool.take() {
            Some(pool) => {
                let out = pool.install(|| f(self));
                self.pool = Some(pool);
                out
            }
            None => f(self),
        }
    }

    /// Run the next round.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let round = self.round + 1;
        let record = self.install(|s| {
            run_round(
                &mut s.states,
                &s.topology,
                s.config.aggregator,
                &s.train,
                &s.dataset,
                round,
            )
        })?;
        self.round = round;
        info!(
            "{} round {round}: mean F1 {:.4} ± {:.4}",
            self.config.aggregator,
            record.mean_f1(),
            record.std_f1()
        );
        Ok(record)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    pub fn initial_weights(&self) -> &ModelWeights {
        &self.initial
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }
}

/// Records of a finished run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub initial: ModelWeights,
    pub final_weights: Vec<ModelWeights>,
    /// Attention matrix, one row per node (FedEP only).
    pub alpha: Option<Vec<Vec<f64>>>,
}

impl ExperimentOutcome {
    pub fn final_mean_f1(&self) -> Option<f64> {
        self.records.last().map(RoundRecord::mean_f1)
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    finish(Simulation::new(config)?)
}

/// [`run_experiment`] on an already loaded dataset.
pub fn run_experiment_on(config: &ExperimentConfig, dataset: Dataset) -> Result<ExperimentOutcome> {
    finish(Simulation::with_dataset(config, dataset)?)
}

fn finish(mut sim: Simulation) -> Result<ExperimentOutcome> {
    let records = (0..sim.config.rounds).map(|_| sim.step()).collect::<Result<Vec<_>>>()?;
    let alpha = (sim.config.aggregator == Aggregator::FedEp).then(|| {
        sim.states
            .iter()
            .map(|s| s.pooling.as_ref().map(|p| p.alpha.clone()).unwrap_or_default())
            .collect()
    });
    Ok(ExperimentOutcome {
        records,
        initial: sim.initial,
        final_weights: sim.states.into_iter().map(|s| s.weights).collect(),
        alpha,
    })
}

/// CSV with columns `round,node_id,f1,loss,alpha,duration_ms`. The alpha
/// cell joins the node's attention vector with `;` and is empty for other
/// aggregators; duration is left empty unless `with_timings` is set.
pub fn write_rounds_csv<W: Write>(out: W, records: &[RoundRecord], with_timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "node_id", "f1", "loss", "alpha", "duration_ms"])?;
    for r in records {
        let duration = if with_timings {
            format!("{:.3}", r.duration_ms)
        } else {
            String::new()
        };
        for (node, report) in r.reports.iter().enumerate() {
            let alpha = r.alphas[node]
                .as_ref()
                .map(|a| a.iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            w.write_record([
                r.round.to_string(),
                node.to_string(),
                report.macro_f1.to_string(),
                report.loss.to_string(),
                alpha,
                duration.clone(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("writing round CSV", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundSummary>,
    pub final_mean_f1: Option<f64>,
    pub alpha: Option<Vec<Vec<f64>>>,
}

impl ExperimentSummary {
    pub fn new(config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Self {
        Self {
            config: config.clone(),
            rounds: outcome
                .records
                .iter()
                .map(|r| RoundSummary {
                    round: r.round,
                    mean_f1: r.mean_f1(),
                    std_f1: r.std_f1(),
                    mean_loss: mean(r.reports.iter().map(|x| x.loss)),
                })
                .collect(),
            final_mean_f1: outcome.final_mean_f1(),
            alpha: outcome.alpha.clone(),
        }
    }
}

/// Write `rounds.csv` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let csv_path = dir.join("rounds.csv");
    let file =
        std::fs::File::create(&csv_path).map_err(|e| Error::io(format!("creating {}", csv_path.display()), e))?;
    write_rounds_csv(std::io::BufWriter::new(file), &outcome.records, config.record_timings)?;
    let summary = serde_json::to_string_pretty(&ExperimentSummary::new(config, outcome))?;
    let json_path = dir.join("summary.json");
    std::fs::write(&json_path, summary).map_err(|e| Error::io(format!("writing {}", json_path.display()), e))?;
    Ok(())
}
