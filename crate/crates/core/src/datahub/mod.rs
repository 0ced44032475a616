//! Datasets and non-IID partitioning across federation nodes.

mod dirichlet;
mod idx;
mod synthetic;

pub use dirichlet::{
    dirichlet_partition, dirichlet_partition_of, dirichlet_variance, iid_partition_of, sample_dirichlet,
    PartitionGroup, PartitionSpec,
};
pub use idx::{load_idx_dataset, write_idx_dataset, IMAGE_MAGIC, LABEL_MAGIC};
pub use synthetic::make_synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numkit::{Matrix, Rng};
use crate::{Error, Result};

/// Labelled samples with features scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid(format!(
                "a dataset needs at least 2 classes, got {n_classes}"
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Consistency(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The first `n` samples (or all of them if there are fewer).
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset::new(
            self.features.select_rows(&idx),
            self.labels[..n].to_vec(),
            self.n_classes,
        )
    }

    /// Label counts over the given sample indices.
    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Indices of `pool` grouped by label, preserving pool order.
    pub(crate) fn by_class(&self, pool: &[usize]) -> Vec<Vec<usize>> {
        let mut classes = vec![Vec::new(); self.n_classes];
        for &i in pool {
            classes[self.labels[i]].push(i);
        }
        classes
    }
}

/// Per-node lists of sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(assignments: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(node) = assignments.iter().position(Vec::is_empty) {
            return Err(Error::Partition(format!("node {node} has no samples")));
        }
        let mut seen = std::collections::HashSet::new();
        for idx in assignments.iter().flatten() {
            if !seen.insert(*idx) {
                return Err(Error::Partition(format!("sample {idx} assigned twice")));
            }
        }
        Ok(Self { assignments })
    }

    pub fn n_nodes(&self) -> usize {
        self.assignments.len()
    }

    pub fn node(&self, k: usize) -> &[usize] {
        &self.assignments[k]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// `{"0": [...], "1": [...], ...}`
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<String, &Vec<usize>> = self
            .assignments
            .iter()
            .enumerate()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Ok(serde_json::to_string(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<usize>> = serde_json::from_str(text)?;
        let mut slots: Vec<Option<Vec<usize>>> = vec![None; map.len()];
        for (key, indices) in map {
            let node: usize = key
                .parse()
                .map_err(|_| Error::Partition(format!("node id `{key}` is not an integer")))?;
            let slot = slots
                .get_mut(node)
                .ok_or_else(|| Error::Partition(format!("node ids are not contiguous (saw {node})")))?;
            *slot = Some(indices);
        }
        Partition::new(slots.into_iter().map(|s| s.unwrap_or_default()).collect())
    }
}

/// Train and test indices held by one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split every node's allocation into a local train set and a local test set
/// with the same label proportions. Each class contributes
/// `test_fraction` of its samples (largest-remainder rounding at node level);
/// both sides are kept non-empty whenever the node holds two or more samples.
pub fn local_splits(dataset: &Dataset, partition: &Partition, test_fraction: f64) -> Result<Vec<NodeSplit>> {
    check_fraction(test_fraction)?;
    partition
        .assignments()
        .iter()
        .map(|node| {
            let by_class = dataset.by_class(node);
            let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
            let mut n_test = (node.len() as f64 * test_fraction).round() as usize;
            if node.len() >= 2 {
                n_test = n_test.clamp(1, node.len() - 1);
            } else {
                n_test = 0;
            }
            let shares: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let per_class = apportion_capped(&shares, n_test, &counts);
            let mut split = NodeSplit {
                train: Vec::new(),
                test: Vec::new(),
            };
            for (members, &t) in by_class.iter().zip(&per_class) {
                split.test.extend_from_slice(&members[..t]);
                split.train.extend_from_slice(&members[t..]);
            }
            Ok(split)
        })
        .collect()
}

/// Stratified hold-out of `test_fraction` of the whole dataset. Returns
/// `(train_pool, test)`.
pub fn global_holdout(rng: &mut Rng, dataset: &Dataset, test_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction(test_fraction)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut members in dataset.by_class(&all) {
        rng.shuffle(&mut members);
        let t = (members.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&members[..t]);
        train.extend_from_slice(&members[t..]);
    }
    if test.is_empty() || train.is_empty() {
        return Err(Error::Partition("global hold-out left an empty side".into()));
    }
    Ok((train, test))
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::invalid(format!("test fraction must be in (0, 1), got {f}")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `total` units proportionally to
/// `shares`. Ties go to the lower index.
pub(crate) fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    if sum <= 0.0 || shares.is_empty() {
        let mut out = vec![0; shares.len()];
        if let Some(first) = out.first_mut() {
            *first = total;
        }
        return out;
    }
    let quotas: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Largest remainder, then moves any excess over `caps` to entries with room.
fn apportion_capped(shares: &[f64], total: usize, caps: &[usize]) -> Vec<usize> {
    let mut out = largest_remainder(shares, total);
    let mut excess = 0;
    for (o, &c) in out.iter_mut().zip(caps) {
        if *o > c {
            excess += *o - c;
            *o = c;
        }
    }
    for (o, &c) in out.iter_mut().zip(caps) {
        let room = c - *o;
        let take = room.min(excess);
        *o += take;
        excess -= take;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_classes: usize, per_class: usize) -> Dataset {
        let n = n_classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
        Dataset::new(Matrix::zeros(n, 1), labels, n_classes).unwrap()
    }

    #[test]
    fn dataset_invariants() {
        assert!(Dataset::new(Matrix::zeros(2, 1), vec![0, 2], 2).is_err());
        assert!(Dataset::new(Matrix::zeros(3, 1), vec![0, 1], 2).is_err());
        assert!(Dataset::new(Matrix::zeros(1, 1), vec![0], 1).is_err());
    }

    #[test]
    fn largest_remainder_conserves_total() {
        assert_eq!(largest_remainder(&[0.5, 0.3, 0.2], 7), vec![4, 2, 1]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 3), vec![3, 0]);
    }

    #[test]
    fn partition_json_roundtrip() {
        let p = Partition::new((0..12).map(|k| vec![k, k + 100]).collect()).unwrap();
        let text = p.to_json().unwrap();
        assert!(text.contains("\"11\":[11,111]"));
        assert_eq!(Partition::from_json(&text).unwrap(), p);
    }

    #[test]
    fn partition_rejects_duplicates_and_gaps() {
        assert!(Partition::new(vec![vec![1], vec![1]]).is_err());
        assert!(Partition::new(vec![vec![1], vec![]]).is_err());
        assert!(Partition::from_json(r#"{"0":[1],"2":[3]}"#).is_err());
    }

    #[test]
    fn local_splits_are_stratified_and_disjoint() {
        let data = toy(4, 50);
        let part = Partition::new(vec![(0..100).collect(), (100..200).collect()]).unwrap();
        let splits = local_splits(&data, &part, 0.2).unwrap();
        for (split, node) in splits.iter().zip(part.assignments()) {
            assert_eq!(split.test.len(), 20);
            assert_eq!(split.train.len() + split.test.len(), node.len());
            assert_eq!(data.label_histogram(&split.test), vec![5, 5, 5, 5]);
            let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
            all.sort_unstable();
            let mut expect = node.clone();
            expect.sort_unstable();
            assert_eq!(all, expect);
        }
    }

    #[test]
    fn local_split_keeps_both_sides_nonempty() {
        let data = toy(2, 2);
        let part = Partition::new(vec![vec![0, 1], vec![2], vec![3]]).unwrap();
        let splits = local_splits(&data, &part, 0.2).unwrap();
        assert_eq!((splits[0].train.len(), splits[0].test.len()), (1, 1));
        assert_eq!((splits[1].train.len(), splits[1].test.len()), (1, 0));
    }

    #[test]
    fn global_holdout_is_stratified() {
        let data = toy(5, 40);
        let (train, test) = global_holdout(&mut Rng::new(1), &data, 0.25).unwrap();
        assert_eq!(data.label_histogram(&test), vec![10; 5]);
        assert_eq!(train.len() + test.len(), 200);
    }
}
