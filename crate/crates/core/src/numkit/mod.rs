//! Small deterministic numeric kernel shared by the statistical and
//! learning code: seeded random streams, dense matrices, and stable
//! log-domain reductions.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::{sample_gamma, Rng};

use crate::{Error, Result};

/// `ln Σ exp(vᵢ)`, shifted by the maximum so that inputs far below zero do
/// not underflow.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or_else(|| Error::invalid("log_sum_exp of an empty vector"))?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if !max.is_finite() {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax of `values`, computed through [`log_sum_exp`].
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(values)?;
    Ok(values.iter().map(|v| (v - lse).exp()).collect())
}
