//! Experiment configuration: JSON schema, defaults and validation.
//!
//! Every section has defaults, so `{}` is a complete config. Enumerated
//! choices use external tagging, e.g. `"partition": {"dirichlet": {"alpha": 0.1}}`
//! or `"topology": "ring"`. Keys the schema does not know are collected and
//! reported together. Relative paths in a config file are taken relative to
//! the file's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datahub::{PartitionGroup, PartitionSpec};
use crate::distfit::{BicPenalty, FitConfig, DISCRETE_FLOOR};
use crate::federation::Aggregator;
use crate::learner::{TrainConfig, DEFAULT_HIDDEN};
use crate::pooling::{AttentionMode, PoolingConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub topology: TopologyConfig,
    pub n_nodes: usize,
    pub rounds: usize,
    pub aggregator: Aggregator,
    pub train: TrainSection,
    /// Proximal coefficient used when the aggregator is `fedprox`.
    pub fedprox_mu: f64,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    pub fit: FitSection,
    pub flags: Flags,
    /// Share of each node's data held out as its local test set.
    pub test_fraction: f64,
    /// Worker threads for per-node work; `null` uses all cores.
    pub workers: Option<usize>,
    /// Fill the `duration_ms` column. Off by default so that reruns produce
    /// identical CSV files.
    pub record_timings: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            topology: TopologyConfig::FullyConnected,
            n_nodes: 10,
            rounds: 10,
            aggregator: Aggregator::FedAvg,
            train: TrainSection::default(),
            fedprox_mu: 0.01,
            hidden: DEFAULT_HIDDEN.to_vec(),
            fit: FitSection::default(),
            flags: Flags::default(),
            test_fraction: 0.2,
            workers: None,
            record_timings: false,
            output_dir: PathBuf::from("results"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Idx(IdxConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticConfig::default())
    }
}

/// Gaussian blobs around fixed class centres in `[0, 1]^n_features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub n_features: usize,
    pub spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_per_class: 200,
            n_features: 32,
            spread: 0.15,
        }
    }
}

/// IDX image/label file pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Keep only the first `max_samples` samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionConfig {
    /// One Dirichlet concentration for every node.
    Dirichlet { alpha: f64 },
    /// Consecutive node blocks with their own concentration.
    Mixed { groups: Vec<PartitionGroup> },
    /// Class-stratified round-robin split.
    Iid,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig::Dirichlet { alpha: 1.0 }
    }
}

impl PartitionConfig {
    /// `None` for the IID split.
    pub fn spec(&self, n_nodes: usize) -> Result<Option<PartitionSpec>> {
        match self {
            PartitionConfig::Dirichlet { alpha } => PartitionSpec::pure(n_nodes, *alpha).map(Some),
            PartitionConfig::Mixed { groups } => PartitionSpec::mixed(n_nodes, groups.clone()).map(Some),
            PartitionConfig::Iid => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyConfig {
    FullyConnected,
    Ring,
    /// Symmetric adjacency matrix without self-loops.
    Custom(Vec<Vec<bool>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSection {
    pub rho: f64,
    pub max_iter: usize,
    pub tolerance: f64,
    pub variance_floor: f64,
    pub restarts: usize,
    /// Floor applied inside the KL divergence.
    pub epsilon: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            rho: f.rho,
            max_iter: f.max_iter,
            tolerance: f.tolerance,
            variance_floor: f.variance_floor,
            restarts: f.n_restarts,
            epsilon: DISCRETE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    /// Weight nodes by inverse divergence instead of divergence.
    pub inverse_pooling: bool,
    /// Penalise BIC by the free-parameter count `3M − 1`.
    pub bic_standard: bool,
    /// Evaluate every node on one stratified hold-out of the whole dataset
    /// instead of local test sets.
    pub global_test_set: bool,
}

impl ExperimentConfig {
    /// Parse JSON text. Relative paths stay as written; see [`parse_config`].
    pub fn from_json(text: &str) -> Result<Self> {
        let mut unknown = BTreeSet::new();
        let mut de = serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_ignored::deserialize(&mut de, |path| {
            unknown.insert(path.to_string());
        })?;
        de.end()?;
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown.into_iter().collect()));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            prox_mu: if self.aggregator == Aggregator::FedProx {
                self.fedprox_mu
            } else {
                0.0
            },
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            rho: self.fit.rho,
            max_iter: self.fit.max_iter,
            tolerance: self.fit.tolerance,
            variance_floor: self.fit.variance_floor,
            n_restarts: self.fit.restarts,
            penalty: if self.flags.bic_standard {
                BicPenalty::FreeParameters
            } else {
                BicPenalty::Components
            },
        }
    }

    pub fn pooling_config(&self) -> PoolingConfig {
        PoolingConfig {
            epsilon: self.fit.epsilon,
            mode: if self.flags.inverse_pooling {
                AttentionMode::Inverse
            } else {
                AttentionMode::Proportional
            },
        }
    }

    /// Value checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::config(
                "n_nodes",
                format!("need at least 2 nodes, got {}", self.n_nodes),
            ));
        }
        match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                if s.n_classes < 2 {
                    return Err(Error::config("dataset.synthetic.n_classes", "need at least 2 classes"));
                }
                if s.n_per_class == 0 || s.n_features == 0 {
                    return Err(Error::config(
                        "dataset.synthetic",
                        "n_per_class and n_features must be positive",
                    ));
                }
                if !(s.spread >= 0.0) || !s.spread.is_finite() {
                    return Err(Error::config(
                        "dataset.synthetic.spread",
                        "must be a non-negative number",
                    ));
                }
            }
            DatasetConfig::Idx(idx) => {
                if idx.max_samples == Some(0) {
                    return Err(Error::config("dataset.idx.max_samples", "must be positive"));
                }
            }
        }
        match &self.partition {
            PartitionConfig::Dirichlet { alpha } if !(*alpha > 0.0 && alpha.is_finite()) => {
                return Err(Error::config(
                    "partition.dirichlet.alpha",
                    format!("must be positive, got {alpha}"),
                ));
            }
            PartitionConfig::Mixed { groups } => {
                for (i, g) in groups.iter().enumerate() {
                    if !(g.fraction > 0.0 && g.fraction <= 1.0) {
                        return Err(Error::config(
                            format!("partition.mixed.groups[{i}].fraction"),
                            format!("{} outside (0, 1]", g.fraction),
                        ));
                    }
                    if !(g.alpha > 0.0 && g.alpha.is_finite()) {
                        return Err(Error::config(
                            format!("partition.mixed.groups[{i}].alpha"),
                            format!("must be positive, got {}", g.alpha),
                        ));
                    }
                }
                let total: f64 = groups.iter().map(|g| g.fraction).sum();
                if groups.is_empty() || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config(
                        "partition.mixed.groups",
                        format!("fractions must sum to 1, got {total}"),
                    ));
                }
            }
            _ => {}
        }
        if let TopologyConfig::Custom(adj) = &self.topology {
            if adj.len() != self.n_nodes {
                return Err(Error::config(
                    "topology.custom",
                    format!("{} rows for {} nodes", adj.len(), self.n_nodes),
                ));
            }
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config(
                "train.learning_rate",
                format!("must be positive, got {}", t.learning_rate),
            ));
        }
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            return Err(Error::config(
                "fedprox_mu",
                format!("must be non-negative, got {}", self.fedprox_mu),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        let f = &self.fit;
        if !(f.rho > 0.0 && f.rho <= 1.0) {
            return Err(Error::config("fit.rho", format!("must lie in (0, 1], got {}", f.rho)));
        }
        if f.max_iter == 0 {
            return Err(Error::config("fit.max_iter", "must be positive"));
        }
        if f.restarts == 0 {
            return Err(Error::config("fit.restarts", "must be positive"));
        }
        for (name, v) in [
            ("tolerance", f.tolerance),
            ("variance_floor", f.variance_floor),
            ("epsilon", f.epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(
                    format!("fit.{name}"),
                    format!("must be positive, got {v}"),
                ));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(
                "test_fraction",
                format!("must lie in (0, 1), got {}", self.test_fraction),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be positive"));
        }
        Ok(())
    }

    /// Resolve relative IDX paths and the output directory against `base`
    /// and check that the IDX files exist.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        if let DatasetConfig::Idx(idx) = &mut self.dataset {
            for (field, path) in [
                ("dataset.idx.images", &mut idx.images),
                ("dataset.idx.labels", &mut idx.labels),
            ] {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
                if !path.is_file() {
                    return Err(Error::config(field, format!("{} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }
}

/// Read, parse and validate a config file, resolving relative paths against
/// the file's directory.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.aggregator, Aggregator::FedAvg);
        assert_eq!(c.fit.rho, 0.5);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.rounds, 10);
    }

    #[test]
    fn minimal_synthetic_config() {
        let c = ExperimentConfig::from_json(r#"{"dataset": {"synthetic": {}}}"#).unwrap();
        assert_eq!(c.dataset, DatasetConfig::Synthetic(SyntheticConfig::default()));
        assert_eq!(c.aggregator, Aggregator::FedAvg);
    }

    #[test]
    fn rho_out_of_range_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"fit": {"rho": 1.5}}"#).unwrap_err();
        match err {
            Error::Config { field, msg } => {
                assert_eq!(field, "fit.rho");
                assert!(msg.contains("(0, 1]"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mixed_fractions_must_sum_to_one() {
        let text = r#"{"partition": {"mixed": {"groups": [
            {"fraction": 0.5, "alpha": 50}, {"fraction": 0.4, "alpha": 1}]}}}"#;
        let err = ExperimentConfig::from_json(text).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "partition.mixed.groups"));
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let text =
            r#"{"rounds": 3, "roundz": 4, "train": {"epoch": 2}, "partition": {"dirichlet": {"alpha": 1, "beta": 2}}}"#;
        match ExperimentConfig::from_json(text).unwrap_err() {
            Error::UnknownKeys(keys) => {
                assert_eq!(keys, vec!["partition.beta", "roundz", "train.epoch"]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_variant_is_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"aggregator": "scaffold"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"topology": "star"}"#).is_err());
    }

    #[test]
    fn roundtrip() {
        let text = r#"{
            "seed": 7,
            "dataset": {"idx": {"images": "a.idx", "labels": "b.idx", "max_samples": 6000}},
            "partition": {"mixed": {"groups": [{"fraction": 0.5, "alpha": 50}, {"fraction": 0.5, "alpha": 1}]}},
            "topology": {"custom": [[false, true], [true, false]]},
            "n_nodes": 2,
            "aggregator": "fedep",
            "flags": {"inverse_pooling": true},
            "workers": 3
        }"#;
        let a = ExperimentConfig::from_json(text).unwrap();
        let b = ExperimentConfig::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.aggregator, Aggregator::FedEp);
        assert_eq!(b.pooling_config().mode, AttentionMode::Inverse);
    }

    #[test]
    fn prox_mu_only_applies_to_fedprox() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.train_config().prox_mu, 0.0);
        c.aggregator = Aggregator::FedProx;
        assert_eq!(c.train_config().prox_mu, 0.01);
    }

    #[test]
    fn value_errors_carry_paths() {
        let cases = [
            (r#"{"n_nodes": 1}"#, "n_nodes"),
            (r#"{"test_fraction": 1.0}"#, "test_fraction"),
            (r#"{"train": {"learning_rate": 0}}"#, "train.learning_rate"),
            (
                r#"{"partition": {"dirichlet": {"alpha": -1}}}"#,
                "partition.dirichlet.alpha",
            ),
            (r#"{"topology": {"custom": [[false]]}}"#, "topology.custom"),
        ];
        for (text, want) in cases {
            match ExperimentConfig::from_json(text).unwrap_err() {
                Error::Config { field, .. } => assert_eq!(field, want, "{text}"),
                other => panic!("{text}: unexpected {other}"),
            }
        }
    }

    #[test]
    fn missing_idx_files_fail_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"dataset": {"idx": {"images": "nope", "labels": "nope2"}}}"#).unwrap();
        assert!(matches!(
            parse_config(&path).unwrap_err(),
            Error::Config { ref field, .. } if field == "dataset.idx.images"
        ));
    }
}
