//! Phase 1 of FedEP: a one-dimensional Gaussian mixture fitted to a node's
//! label vector by EM, with the component count chosen by BIC.

mod em;
mod select;

pub use em::{e_step, expectation_max, initial_params, m_step, EmFit, Responsibilities};
pub use select::{
    bic, max_components, pretrain_distribution_fitting, select_components, BicPenalty, FitConfig, Selection,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor added to every discretised class probability.
pub const DISCRETE_FLOOR: f64 = 1e-12;

/// Normal density `N(y; mean, variance)`.
pub fn gaussian_pdf(y: f64, mean: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!("variance must be positive, got {variance}")));
    }
    Ok(ln_gaussian_pdf(y, mean, variance).exp())
}

#[inline]
pub(crate) fn ln_gaussian_pdf(y: f64, mean: f64, variance: f64) -> f64 {
    let d = y - mean;
    -0.5 * ((2.0 * PI * variance).ln() + d * d / variance)
}

/// Mixture coefficients `[π, μ, σ²]`, one entry per component.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || variances.len() != m {
            return Err(Error::Consistency(format!(
                "mixture vectors must share a positive length, got {}/{}/{}",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}")));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mixture means must be finite"));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("mixture variances must be positive"));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Mixture density at `y`.
    pub fn density(&self, y: f64) -> f64 {
        self.components()
            .map(|(w, m, v)| w * ln_gaussian_pdf(y, m, v).exp())
            .sum()
    }

    pub fn components(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, &m), &v)| (w, m, v))
    }

    /// Evaluates the mixture density on the class grid `0..n_classes`, adds
    /// `floor` to every entry and normalises.
    pub fn discretize(&self, n_classes: usize, floor: f64) -> Vec<f64> {
        let raw: Vec<f64> = (0..n_classes).map(|c| self.density(c as f64) + floor).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }
}

/// A node's fitted label distribution together with its sample count; this
/// is the payload a node shares with its neighbours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FittedWire", into = "FittedWire")]
pub struct FittedDistribution {
    params: GmmParams,
    n_samples: usize,
    n_classes: usize,
}

impl FittedDistribution {
    pub fn new(params: GmmParams, n_samples: usize, n_classes: usize) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::invalid("a fitted distribution needs at least one sample"));
        }
        if n_classes < 2 {
            return Err(Error::invalid(format!("n_classes must be at least 2, got {n_classes}")));
        }
        Ok(Self {
            params,
            n_samples,
            n_classes,
        })
    }

    /// Stand-in used when EM fails: one narrow component per observed class,
    /// weighted by the empirical label frequencies. Its discretisation is the
    /// normalised histogram up to the `DISCRETE_FLOOR`.
    pub fn from_histogram(labels: &[usize], n_classes: usize, variance_floor: f64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("cannot build a histogram from no labels"));
        }
        let mut counts = vec![0usize; n_classes];
        for &l in labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::Consistency(format!("label {l} >= {n_classes}")))? += 1;
        }
        let n = labels.len() as f64;
        let (mut w, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (c, &count) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
            w.push(count as f64 / n);
            m.push(c as f64);
            v.push(variance_floor);
        }
        Self::new(GmmParams::new(w, m, v)?, labels.len(), n_classes)
    }

    pub fn params(&self) -> &GmmParams {
        &self.params
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Class probabilities `P(y)` for `y = 0..n_classes` implied by a fitted
/// mixture.
pub fn discretize(fit: &FittedDistribution) -> Vec<f64> {
    fit.params.discretize(fit.n_classes, DISCRETE_FLOOR)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FittedWire {
    pi: Vec<f64>,
    mu: Vec<f64>,
    sigma2: Vec<f64>,
    n_samples: usize,
    n_classes: usize,
}

impl From<FittedDistribution> for FittedWire {
    fn from(f: FittedDistribution) -> Self {
        FittedWire {
            pi: f.params.weights,
            mu: f.params.means,
            sigma2: f.params.variances,
            n_samples: f.n_samples,
            n_classes: f.n_classes,
        }
    }
}

impl TryFrom<FittedWire> for FittedDistribution {
    type Error = Error;

    fn try_from(w: FittedWire) -> Result<Self> {
        FittedDistribution::new(GmmParams::new(w.pi, w.mu, w.sigma2)?, w.n_samples, w.n_classes)
    }
}
