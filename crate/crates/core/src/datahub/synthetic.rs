use super::Dataset;
use crate::numkit::{Matrix, Rng};
use crate::{Error, Result};

const CENTER_SEED: u64 = 0x0c1a_55ce_47e2;

/// Isotropic Gaussian blobs, one per class, clamped to `[0, 1]`.
///
/// Class centres come from a fixed stream (uniform in `[0.1, 0.9]` per
/// feature) so they do not move with `rng`; only the noise does. Samples are
/// laid out class by class.
pub fn make_synthetic(
    rng: &mut Rng,
    n_classes: usize,
    n_per_class: usize,
    n_features: usize,
    cluster_spread: f64,
) -> Result<Dataset> {
    if n_classes < 2 || n_per_class == 0 || n_features == 0 {
        return Err(Error::invalid(format!(
            "synthetic dataset needs n_classes >= 2 and positive sizes, got ({n_classes}, {n_per_class}, {n_features})"
        )));
    }
    if !cluster_spread.is_finite() || cluster_spread < 0.0 {
        return Err(Error::invalid(format!(
            "cluster spread must be finite and non-negative, got {cluster_spread}"
        )));
    }
    let mut centers = Rng::new(CENTER_SEED);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..n_features).map(|_| centers.uniform_range(0.1, 0.9)).collect())
        .collect();
    let n = n_classes * n_per_class;
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            features.extend(
                center
                    .iter()
                    .map(|c| (c + cluster_spread * rng.normal()).clamp(0.0, 1.0)),
            );
            labels.push(class);
        }
    }
    Dataset::new(Matrix::from_vec(n, n_features, features)?, labels, n_classes)
}
