//! Local training for one node: an MLP trained with mini-batch SGD, with an
//! optional proximal pull toward the round-start model (FedProx), and
//! macro-F1 evaluation.
//!
//! Parameters and activations are `f32` during training and inference; the
//! loss is accumulated in `f64`. The network code is generic so that gradient
//! checks can run it in `f64`.

mod metrics;
mod mlp;

pub use metrics::{evaluate, macro_f1_from_predictions, EvalReport};
pub use mlp::{Mlp, Real};

use serde::{Deserialize, Serialize};

use crate::datahub::Dataset;
use crate::numkit::{softmax, Matrix, Rng};
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 128];

/// Flat parameter vector of a fully connected network. `layers` lists the
/// widths from input to output; each layer contributes an `in × out`
/// row-major weight block followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    layers: Vec<usize>,
    params: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsHeader {
    layers: Vec<usize>,
    dtype: String,
    count: usize,
}

impl ModelWeights {
    pub fn new(layers: Vec<usize>, params: Vec<f32>) -> Result<Self> {
        if layers.len() < 2 || layers.contains(&0) {
            return Err(Error::invalid(format!("invalid layer widths {layers:?}")));
        }
        let expected = mlp::param_count(&layers);
        if params.len() != expected {
            return Err(Error::Consistency(format!(
                "{} parameters for layers {layers:?}, expected {expected}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(Self { layers, params })
    }

    pub fn zeros(layers: Vec<usize>) -> Result<Self> {
        let n = mlp::param_count(&layers);
        Self::new(layers, vec![0.0; n])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(layers: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(layers)?;
        let offsets = mlp::layer_offsets(&model.layers);
        for (l, (w_off, _)) in offsets.into_iter().enumerate() {
            let (fan_in, fan_out) = (model.layers[l], model.layers[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut model.params[w_off..w_off + fan_in * fan_out] {
                *p = rng.uniform_range(-limit, limit) as f32;
            }
        }
        Ok(model)
    }

    /// `input → hidden… → n_classes`.
    pub fn mlp_layers(n_features: usize, hidden: &[usize], n_classes: usize) -> Vec<usize> {
        let mut layers = vec![n_features];
        layers.extend_from_slice(hidden);
        layers.push(n_classes);
        layers
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn same_shape(&self, other: &ModelWeights) -> bool {
        self.layers == other.layers
    }

    /// Little-endian `u32` header length, a JSON shape header, then the
    /// parameters as little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&WeightsHeader {
            layers: self.layers.clone(),
            dtype: "f32le".into(),
            count: self.params.len(),
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(4 + header.len() + 4 * self.params.len());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Consistency(format!("weights blob: {msg}"));
        let len = u32::from_le_bytes(
            bytes
                .get(..4)
                .ok_or_else(|| bad("missing header length"))?
                .try_into()
                .unwrap(),
        ) as usize;
        let header: WeightsHeader =
            serde_json::from_slice(bytes.get(4..4 + len).ok_or_else(|| bad("truncated header"))?)?;
        if header.dtype != "f32le" {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        let payload = &bytes[4 + len..];
        if payload.len() != header.count * 4 {
            return Err(bad("payload length does not match count"));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header.layers, params)
    }
}

/// Local SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Proximal coefficient μ; zero disables the term.
    pub prox_mu: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.01,
            prox_mu: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if !(self.prox_mu >= 0.0) || !self.prox_mu.is_finite() {
            return Err(Error::invalid(format!(
                "proximal mu {} must be non-negative",
                self.prox_mu
            )));
        }
        Ok(())
    }
}

/// Result of [`train_local`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub weights: ModelWeights,
    /// Mean mini-batch cross-entropy of each epoch (proximal term excluded).
    pub epoch_losses: Vec<f64>,
}

pub(crate) fn gather_features<T: Real>(data: &Dataset, indices: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(indices.len() * data.n_features());
    for &i in indices {
        out.extend(data.features().row(i).iter().map(|&v| T::from_f64(v)));
    }
    out
}

/// Mini-batch SGD on cross-entropy over the samples `indices` of `data`.
/// Each epoch visits the samples in an order drawn from `rng`. With
/// `prox_mu > 0` every step adds `μ (w − anchor)` to the gradient.
pub fn train_local(
    weights_in: &ModelWeights,
    data: &Dataset,
    indices: &[usize],
    config: &TrainConfig,
    rng: &mut Rng,
    anchor: &ModelWeights,
) -> Result<LocalUpdate> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::invalid("cannot train on an empty slice"));
    }
    check_input(weights_in, data)?;
    if !weights_in.same_shape(anchor) {
        return Err(Error::Consistency("anchor shape differs from the model".into()));
    }
    let width = data.n_features();
    let features: Vec<f32> = gather_features(data, indices);
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels()[i]).collect();

    let mut net = Mlp::<f32>::new(&weights_in.layers);
    let mut params = weights_in.params.clone();
    let mut grad = vec![0f32; params.len()];
    let lr = config.learning_rate as f32;
    let mu = config.prox_mu as f32;
    let batch = config.batch_size.min(indices.len());
    let mut order: Vec<usize> = (0..indices.len()).collect();
    let mut xb = vec![0f32; batch * width];
    let mut yb = vec![0usize; batch];
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let rows = chunk.len();
            for (slot, &s) in chunk.iter().enumerate() {
                xb[slot * width..(slot + 1) * width].copy_from_slice(&features[s * width..(s + 1) * width]);
                yb[slot] = labels[s];
            }
            let prox = (mu > 0.0).then_some((anchor.params.as_slice(), mu));
            let loss = net.loss_and_gradient(&params, &xb[..rows * width], &yb[..rows], prox, &mut grad);
            let data_loss = if mu > 0.0 {
                loss - 0.5 * f64::from(mu) * squared_distance(&params, &anchor.params)
            } else {
                loss
            };
            if !loss.is_finite() {
                return Err(Error::Training { epoch, batch: b, loss });
            }
            total += data_loss * rows as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        }
        epoch_losses.push(total / indices.len() as f64);
    }
    if let Some(pos) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Training {
            epoch: config.epochs.saturating_sub(1),
            batch: pos,
            loss: f64::NAN,
        });
    }
    Ok(LocalUpdate {
        weights: ModelWeights {
            layers: weights_in.layers.clone(),
            params,
        },
        epoch_losses,
    })
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(x - y);
            d * d
        })
        .sum()
}

fn check_input(weights: &ModelWeights, data: &Dataset) -> Result<()> {
    if weights.layers[0] != data.n_features() {
        return Err(Error::Consistency(format!(
            "model expects {} features, data has {}",
            weights.layers[0],
            data.n_features()
        )));
    }
    if *weights.layers.last().unwrap() != data.n_classes() {
        return Err(Error::Consistency(format!(
            "model has {} outputs, data has {} classes",
            weights.layers.last().unwrap(),
            data.n_classes()
        )));
    }
    Ok(())
}

/// Class probabilities for every row of `features`.
pub fn forward(weights: &ModelWeights, features: &Matrix) -> Result<Matrix> {
    if features.cols() != weights.layers[0] {
        return Err(Error::Consistency(format!(
            "model expects {} features, batch has {}",
            weights.layers[0],
            features.cols()
        )));
    }
    let n_out = *weights.layers.last().unwrap();
    let x: Vec<f32> = features.as_slice().iter().map(|&v| v as f32).collect();
    let mut net = Mlp::<f32>::new(&weights.layers);
    let logits = net.forward(&weights.params, &x, features.rows());
    let mut out = Vec::with_capacity(features.rows() * n_out);
    for row in logits.chunks_exact(n_out) {
        let z: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        out.extend(softmax(&z)?);
    }
    Matrix::from_vec(features.rows(), n_out, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::make_synthetic;

    fn blobs(spread: f64, seed: u64) -> Dataset {
        make_synthetic(&mut Rng::new(seed), 2, 100, 6, spread).unwrap()
    }

    fn small_model(data: &Dataset, seed: u64) -> ModelWeights {
        ModelWeights::init(
            ModelWeights::mlp_layers(data.n_features(), &[16, 8], data.n_classes()),
            &mut Rng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let w = ModelWeights::zeros(vec![3, 4, 5]).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.9, 0.3], vec![1.0, 0.0, 0.5]]).unwrap();
        let p = forward(&w, &x).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn forward_rows_are_distributions() {
        let mut rng = Rng::new(2);
        let w = ModelWeights::init(vec![4, 8, 8, 3], &mut rng).unwrap();
        let x = Matrix::from_vec(5, 4, (0..20).map(|_| rng.uniform()).collect()).unwrap();
        let p = forward(&w, &x).unwrap();
        assert_eq!(p.rows(), 5);
        for r in 0..5 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let dup = Matrix::from_rows(&[x.row(0).to_vec(), x.row(0).to_vec()]).unwrap();
        let q = forward(&w, &dup).unwrap();
        assert_eq!(q.row(0), q.row(1));
        assert!(forward(&w, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = blobs(0.1, 1);
        let w = small_model(&data, 3);
        let idx: Vec<usize> = (0..data.len()).collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train_local(&w, &data, &idx, &cfg, &mut Rng::new(0), &w).unwrap();
        assert_eq!(out.weights, w);
    }

    #[test]
    fn training_loss_decreases_on_separable_blobs() {
        let data = blobs(0.05, 2);
        let w = small_model(&data, 4);
        let idx: Vec<usize> = (0..data.len()).collect();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train_local(&w, &data, &idx, &cfg, &mut Rng::new(5), &w).unwrap();
        assert_eq!(out.epoch_losses.len(), 3);
        for pair in out.epoch_losses.windows(2) {
            assert!(pair[1] < pair[0], "{:?}", out.epoch_losses);
        }
    }

    #[test]
    fn noiseless_blobs_are_learned_perfectly() {
        let data = blobs(0.0, 3);
        let w = small_model(&data, 6);
        let idx: Vec<usize> = (0..data.len()).collect();
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train_local(&w, &data, &idx, &cfg, &mut Rng::new(5), &w).unwrap();
        let report = evaluate(&out.weights, &data, &idx).unwrap();
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(0.2, 4);
        let w = small_model(&data, 7);
        let idx: Vec<usize> = (0..data.len()).step_by(2).collect();
        let cfg = TrainConfig::default();
        let a = train_local(&w, &data, &idx, &cfg, &mut Rng::new(9), &w).unwrap();
        let b = train_local(&w, &data, &idx, &cfg, &mut Rng::new(9), &w).unwrap();
        let bits = |m: &ModelWeights| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.weights), bits(&b.weights));
    }

    #[test]
    fn strong_proximal_term_pulls_to_anchor() {
        let data = blobs(0.2, 5);
        let anchor = small_model(&data, 1);
        let start = small_model(&data, 2);
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut last = squared_distance(start.params(), anchor.params());
        for epochs in 1..=5 {
            // one full-batch step per epoch, so epoch count = step count
            let cfg = TrainConfig {
                epochs,
                batch_size: data.len(),
                learning_rate: 5e-7,
                prox_mu: 1e6,
            };
            let out = train_local(&start, &data, &idx, &cfg, &mut Rng::new(0), &anchor).unwrap();
            let d = squared_distance(out.weights.params(), anchor.params());
            assert!(d < last, "step {epochs}: {d} !< {last}");
            last = d;
        }
        assert!(last < 1e-3 * squared_distance(start.params(), anchor.params()));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let data = blobs(0.1, 6);
        let w = ModelWeights::zeros(vec![5, 4, 2]).unwrap();
        let idx = [0usize, 1];
        assert!(matches!(
            train_local(&w, &data, &idx, &TrainConfig::default(), &mut Rng::new(0), &w),
            Err(Error::Consistency(_))
        ));
        let good = small_model(&data, 0);
        assert!(train_local(&good, &data, &[], &TrainConfig::default(), &mut Rng::new(0), &good).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = blobs(0.5, 7);
        let w = small_model(&data, 0);
        let idx: Vec<usize> = (0..data.len()).collect();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_local(&w, &data, &idx, &cfg, &mut Rng::new(0), &w),
            Err(Error::Training { .. })
        ));
    }

    #[test]
    fn weights_blob_roundtrip() {
        let w = ModelWeights::init(vec![3, 4, 2], &mut Rng::new(1)).unwrap();
        let bytes = w.to_bytes();
        let header_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + header_len]).unwrap();
        assert_eq!(header["layers"], serde_json::json!([3, 4, 2]));
        assert_eq!(bytes.len(), 4 + header_len + 4 * w.len());
        assert_eq!(ModelWeights::from_bytes(&bytes).unwrap(), w);
        assert!(ModelWeights::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn init_is_shared_across_nodes() {
        let a = ModelWeights::init(vec![10, 6, 3], &mut Rng::derive(1, 0, "init")).unwrap();
        let b = ModelWeights::init(vec![10, 6, 3], &mut Rng::derive(1, 0, "init")).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 16.0).sqrt() as f32;
        assert!(a.params()[..60].iter().all(|p| p.abs() <= limit));
        assert!(a.params()[60..66].iter().all(|&p| p == 0.0));
    }
}
