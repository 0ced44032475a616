use serde::{Deserialize, Serialize};

use super::{largest_remainder, Dataset, Partition};
use crate::numkit::{log_sum_exp, Rng};
use crate::{Error, Result};

/// A block of nodes sharing one Dirichlet concentration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionGroup {
    pub fraction: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub n_nodes: usize,
    pub groups: Vec<PartitionGroup>,
}

impl PartitionSpec {
    /// Every node uses the same `alpha`.
    pub fn pure(n_nodes: usize, alpha: f64) -> Result<Self> {
        Self::mixed(n_nodes, vec![PartitionGroup { fraction: 1.0, alpha }])
    }

    pub fn mixed(n_nodes: usize, groups: Vec<PartitionGroup>) -> Result<Self> {
        let spec = Self { n_nodes, groups };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::invalid("partition needs at least one node"));
        }
        if self.groups.is_empty() {
            return Err(Error::invalid("partition needs at least one group"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if !(g.fraction > 0.0 && g.fraction <= 1.0) {
                return Err(Error::invalid(format!(
                    "group {i}: fraction {} outside (0, 1]",
                    g.fraction
                )));
            }
            if !(g.alpha > 0.0) || g.alpha.is_nan() {
                return Err(Error::invalid(format!("group {i}: alpha {} must be positive", g.alpha)));
            }
        }
        let total: f64 = self.groups.iter().map(|g| g.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("group fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Concentration used by each node. Groups claim `ceil(fraction * n)`
    /// consecutive node ids in order; the last group absorbs any shortfall.
    pub fn node_alphas(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_nodes);
        for g in &self.groups {
            let want = (g.fraction * self.n_nodes as f64 - 1e-9).ceil() as usize;
            let take = want.min(self.n_nodes - out.len());
            out.extend(std::iter::repeat_n(g.alpha, take));
        }
        let last = self.groups.last().map_or(1.0, |g| g.alpha);
        out.resize(self.n_nodes, last);
        out
    }
}

/// Draw from the symmetric Dirichlet `Dir(alpha * 1_k)` by normalising Gamma
/// draws. Normalisation happens in log space so that very small `alpha` never
/// produces an all-zero vector.
pub fn sample_dirichlet(rng: &mut Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("Dirichlet dimension must be positive"));
    }
    let logs = (0..k)
        .map(|_| rng.ln_gamma_variate(alpha))
        .collect::<Result<Vec<_>>>()?;
    let norm = log_sum_exp(&logs)?;
    Ok(logs.iter().map(|l| (l - norm).exp()).collect())
}

/// Variance of one coordinate of a symmetric `Dir(alpha * 1_k)`:
/// `(k - 1) / (k^2 (k alpha + 1))`.
pub fn dirichlet_variance(alpha: f64, k: usize) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let k = k as f64;
    Ok((k - 1.0) / (k * k * (k * alpha + 1.0)))
}

/// Dirichlet non-IID partition of the whole dataset.
pub fn dirichlet_partition(rng: &mut Rng, dataset: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    let pool: Vec<usize> = (0..dataset.len()).collect();
    dirichlet_partition_of(rng, dataset, &pool, spec)
}

/// Dirichlet non-IID partition restricted to the sample indices in `pool`.
///
/// Nodes get equal shares of the pool (remainder to the lowest ids). Each
/// node draws label proportions `p ~ Dir(alpha)`, turns them into per-class
/// quotas by largest remainder, and takes what it can from the shuffled class
/// pools. Any shortfall from exhausted classes is filled from the classes the
/// node prefers most that still have samples.
pub fn dirichlet_partition_of(
    rng: &mut Rng,
    dataset: &Dataset,
    pool: &[usize],
    spec: &PartitionSpec,
) -> Result<Partition> {
    spec.validate()?;
    let n_nodes = spec.n_nodes;
    if pool.len() < n_nodes {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {n_nodes} nodes",
            pool.len()
        )));
    }
    let k = dataset.n_classes();
    let mut classes = dataset.by_class(pool);
    for members in &mut classes {
        rng.shuffle(members);
    }
    let proportions = spec
        .node_alphas()
        .into_iter()
        .map(|alpha| sample_dirichlet(rng, alpha, k))
        .collect::<Result<Vec<_>>>()?;

    let base = pool.len() / n_nodes;
    let extra = pool.len() % n_nodes;
    let mut cursor = vec![0usize; k];
    let mut assignments = Vec::with_capacity(n_nodes);
    for (node, p) in proportions.iter().enumerate() {
        let size = base + usize::from(node < extra);
        let quota = largest_remainder(p, size);
        let mut take = vec![0usize; k];
        for c in 0..k {
            take[c] = quota[c].min(classes[c].len() - cursor[c]);
        }
        let mut missing = size - take.iter().sum::<usize>();
        if missing > 0 {
            let mut preference: Vec<usize> = (0..k).collect();
            preference.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            for c in preference {
                let room = classes[c].len() - cursor[c] - take[c];
                let extra = room.min(missing);
                take[c] += extra;
                missing -= extra;
                if missing == 0 {
                    break;
                }
            }
        }
        debug_assert_eq!(missing, 0);
        let mut members = Vec::with_capacity(size);
        for c in 0..k {
            members.extend_from_slice(&classes[c][cursor[c]..cursor[c] + take[c]]);
            cursor[c] += take[c];
        }
        assignments.push(members);
    }
    Partition::new(assignments)
}

/// Exactly IID partition of `pool`: each class is shuffled and dealt
/// round-robin, so with class counts divisible by `n_nodes` every node ends
/// up with the same label histogram.
pub fn iid_partition_of(rng: &mut Rng, dataset: &Dataset, pool: &[usize], n_nodes: usize) -> Result<Partition> {
    if n_nodes == 0 || pool.len() < n_nodes {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {n_nodes} nodes",
            pool.len()
        )));
    }
    let mut assignments = vec![Vec::new(); n_nodes];
    let mut next = 0;
    for mut members in dataset.by_class(pool) {
        rng.shuffle(&mut members);
        for i in members {
            assignments[next % n_nodes].push(i);
            next += 1;
        }
    }
    Partition::new(assignments)
}
