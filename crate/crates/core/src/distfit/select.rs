use super::em::{expectation_max, EmFit};
use super::FittedDistribution;
use crate::numkit::Rng;
use crate::{Error, Result};

/// Parameter-count term of the BIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BicPenalty {
    /// `M · ln N`, one unit per component.
    #[default]
    Components,
    /// `(3M − 1) · ln N`, the free-parameter count of a 1-D mixture.
    FreeParameters,
}

impl BicPenalty {
    pub fn units(self, m: usize) -> f64 {
        match self {
            BicPenalty::Components => m as f64,
            BicPenalty::FreeParameters => (3 * m - 1) as f64,
        }
    }

    pub fn score(self, log_likelihood: f64, m: usize, n: usize) -> f64 {
        -2.0 * log_likelihood + self.units(m) * (n as f64).ln()
    }
}

/// `−2 ln L + M ln N`.
pub fn bic(log_likelihood: f64, m: usize, n: usize) -> f64 {
    BicPenalty::Components.score(log_likelihood, m, n)
}

/// Settings for EM fitting and component selection.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Maximum component fraction ρ ∈ (0, 1].
    pub rho: f64,
    pub max_iter: usize,
    pub tolerance: f64,
    pub variance_floor: f64,
    pub n_restarts: usize,
    pub penalty: BicPenalty,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            max_iter: 200,
            tolerance: 1e-6,
            variance_floor: 1e-4,
            n_restarts: 1,
            penalty: BicPenalty::Components,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::invalid(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if !(self.tolerance > 0.0) || !(self.variance_floor > 0.0) {
            return Err(Error::invalid("tolerance and variance floor must be positive"));
        }
        Ok(())
    }
}

/// `⌈ρ · |distinct labels|⌉`, at least one and at most the sample count.
pub fn max_components(labels: &[usize], rho: f64) -> usize {
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    // guard against ρ·k landing a hair above an integer
    let m = (rho * distinct.len() as f64 - 1e-9).ceil() as usize;
    m.clamp(1, labels.len().max(1))
}

/// Outcome of the BIC sweep over `M = 1..=m_max`.
#[derive(Debug, Clone)]
pub struct Selection {
    pub best: EmFit,
    pub m: usize,
    pub bic: f64,
    /// `(M, BIC)` for every candidate; `None` where EM failed.
    pub candidates: Vec<(usize, Option<f64>)>,
}

/// Fits `M = 1..=m_max` components and keeps the lowest BIC. Ties keep the
/// smaller `M`. Candidates whose EM run fails are skipped.
pub fn select_components(values: &[f64], m_max: usize, config: &FitConfig, rng: &mut Rng) -> Result<Selection> {
    config.validate()?;
    let mut best: Option<(usize, f64, EmFit)> = None;
    let mut candidates = Vec::with_capacity(m_max);
    let mut last_err = None;
    for m in 1..=m_max.min(values.len()) {
        match expectation_max(values, m, config, rng) {
            Ok(fit) => {
                let score = config.penalty.score(fit.log_likelihood, m, values.len());
                candidates.push((m, Some(score)));
                if best.as_ref().is_none_or(|(_, b, _)| score < *b) {
                    best = Some((m, score, fit));
                }
            }
            Err(e) => {
                log::debug!("EM with {m} components failed: {e}");
                candidates.push((m, None));
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((m, bic, best)) => Ok(Selection {
            best,
            m,
            bic,
            candidates,
        }),
        None => Err(Error::Fit(match last_err {
            Some(e) => format!("every candidate failed, last error: {e}"),
            None => "no candidate component counts".into(),
        })),
    }
}

/// Fits the node's label vector (labels treated as real values) and returns
/// the BIC-selected mixture with `M ≤ ⌈ρ·|distinct labels|⌉`.
pub fn pretrain_distribution_fitting(
    labels: &[usize],
    n_classes: usize,
    config: &FitConfig,
    rng: &mut Rng,
) -> Result<FittedDistribution> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot fit a distribution to an empty label vector"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Consistency(format!("label {bad} >= {n_classes}")));
    }
    let values: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let m_max = max_components(labels, config.rho);
    let selection = select_components(&values, m_max, config, rng)?;
    FittedDistribution::new(selection.best.params, labels.len(), n_classes)
}
