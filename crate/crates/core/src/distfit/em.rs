use super::{ln_gaussian_pdf, GmmParams};
use crate::numkit::{log_sum_exp, Matrix, Rng};
use crate::{Error, Result};

use super::select::FitConfig;

/// Smallest mixture weight kept for a component that received no
/// responsibility mass.
const MIN_WEIGHT: f64 = 1e-300;

/// Posterior component memberships `γ̂` (`N × M`, rows sum to one).
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    matrix: Matrix,
}

impl Responsibilities {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_error(&self) -> f64 {
        (0..self.matrix.rows())
            .map(|r| (self.matrix.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn column_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.matrix.cols()];
        for r in 0..self.matrix.rows() {
            for (m, g) in mass.iter_mut().zip(self.matrix.row(r)) {
                *m += g;
            }
        }
        mass
    }
}

/// Output of one EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    /// `ln L(θ)` at the returned parameters.
    pub log_likelihood: f64,
    pub params: GmmParams,
    /// Log-likelihood after initialisation and after every M-step.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// E-step in log space. Returns `(γ̂, ln L(θ), Q(θ))`, where `Q` is the
/// expected complete-data log-likelihood under the returned `γ̂`.
pub fn e_step(values: &[f64], params: &GmmParams) -> Result<(Responsibilities, f64, f64)> {
    let m = params.n_components();
    let ln_w: Vec<f64> = params.weights().iter().map(|w| w.ln()).collect();
    let mut gamma = Matrix::zeros(values.len(), m);
    let mut joint = vec![0.0; m];
    let mut log_likelihood = 0.0;
    let mut q = 0.0;
    for (n, &y) in values.iter().enumerate() {
        for (j, (_, mean, var)) in params.components().enumerate() {
            joint[j] = ln_w[j] + ln_gaussian_pdf(y, mean, var);
        }
        let norm = log_sum_exp(&joint)?;
        log_likelihood += norm;
        let row = gamma.row_mut(n);
        for j in 0..m {
            let g = (joint[j] - norm).exp();
            row[j] = g;
            if g > 0.0 {
                q += g * joint[j];
            }
        }
    }
    Ok((Responsibilities { matrix: gamma }, log_likelihood, q))
}

/// Closed-form M-step: weights, means and variances from the responsibility
/// masses, with every variance clamped below at `variance_floor`. A component
/// with no mass keeps its previous mean and variance.
pub fn m_step(
    values: &[f64],
    gamma: &Responsibilities,
    previous: &GmmParams,
    variance_floor: f64,
) -> Result<GmmParams> {
    let mass = gamma.column_mass();
    let n = values.len() as f64;
    let m = mass.len();
    let mut means = vec![0.0; m];
    let mut vars = vec![0.0; m];
    let g = gamma.matrix();
    for (r, &y) in values.iter().enumerate() {
        for (j, &w) in g.row(r).iter().enumerate() {
            means[j] += w * y;
        }
    }
    for j in 0..m {
        if mass[j] > 0.0 {
            means[j] /= mass[j];
        }
    }
    for (r, &y) in values.iter().enumerate() {
        for (j, &w) in g.row(r).iter().enumerate() {
            let d = y - means[j];
            vars[j] += w * d * d;
        }
    }
    let mut weights = vec![0.0; m];
    for j in 0..m {
        if mass[j] > 0.0 && means[j].is_finite() {
            vars[j] = (vars[j] / mass[j]).max(variance_floor);
            weights[j] = (mass[j] / n).max(MIN_WEIGHT);
        } else {
            means[j] = previous.means()[j];
            vars[j] = previous.variances()[j];
            weights[j] = MIN_WEIGHT;
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    GmmParams::new(weights, means, vars)
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Deterministic starting point: means at the `(j + ½)/M` quantiles of the
/// sorted sample, every variance at `max(sample variance, floor)`, uniform
/// weights.
pub fn initial_params(values: &[f64], m: usize, variance_floor: f64) -> Result<GmmParams> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let means = (0..m)
        .map(|j| {
            let pos = ((j as f64 + 0.5) / m as f64 * n as f64).floor() as usize;
            sorted[pos.min(n - 1)]
        })
        .collect();
    let var = population_variance(values).max(variance_floor);
    GmmParams::new(vec![1.0 / m as f64; m], means, vec![var; m])
}

fn random_params(values: &[f64], m: usize, variance_floor: f64, rng: &mut Rng) -> Result<GmmParams> {
    let means = (0..m).map(|_| values[rng.below(values.len())]).collect();
    let var = population_variance(values).max(variance_floor);
    GmmParams::new(vec![1.0 / m as f64; m], means, vec![var; m])
}

fn run_from(values: &[f64], start: GmmParams, config: &FitConfig) -> Result<EmFit> {
    let (mut gamma, mut log_likelihood, mut q) = e_step(values, &start)?;
    let mut params = start;
    let mut history = vec![log_likelihood];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        let next = m_step(values, &gamma, &params, config.variance_floor).map_err(|e| Error::Numeric {
            iteration: it,
            msg: e.to_string(),
        })?;
        let (g, ll, q_next) = e_step(values, &next)?;
        if !ll.is_finite() || !q_next.is_finite() {
            return Err(Error::Numeric {
                iteration: it,
                msg: format!("log-likelihood became {ll}"),
            });
        }
        iterations = it;
        params = next;
        gamma = g;
        history.push(ll);
        log_likelihood = ll;
        let delta = (q_next - q).abs();
        q = q_next;
        if delta < config.tolerance {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        log_likelihood,
        params,
        history,
        iterations,
        converged,
    })
}

/// Fits an `m`-component mixture to `values`. The first start is
/// [`initial_params`]; `config.n_restarts - 1` further starts place the
/// means on random sample points. The run with the highest likelihood wins.
pub fn expectation_max(values: &[f64], m: usize, config: &FitConfig, rng: &mut Rng) -> Result<EmFit> {
    if values.is_empty() {
        return Err(Error::invalid("cannot fit a mixture to no data"));
    }
    if m == 0 || m > values.len() {
        return Err(Error::invalid(format!(
            "component count {m} outside [1, {}]",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in fitting data"));
    }
    let mut best = run_from(values, initial_params(values, m, config.variance_floor)?, config)?;
    for _ in 1..config.n_restarts.max(1) {
        let start = random_params(values, m, config.variance_floor, rng)?;
        if let Ok(fit) = run_from(values, start, config) {
            if fit.log_likelihood > best.log_likelihood {
                best = fit;
            }
        }
    }
    Ok(best)
}
