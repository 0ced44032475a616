use serde::{Deserialize, Serialize};

use super::{check_input, gather_features, Mlp, ModelWeights};
use crate::datahub::Dataset;
use crate::{Error, Result};

const EVAL_CHUNK: usize = 512;

/// Classification quality of a model on one slice of data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean F1 over the classes present in the slice's ground truth.
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Ground-truth count per class.
    pub support: Vec<usize>,
    /// Classes absent from the ground truth, left out of the macro mean.
    pub excluded: Vec<usize>,
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub loss: f64,
}

/// Per-class precision/recall/F1 from predictions; undefined ratios count as
/// zero. The macro average runs over classes that occur in `truth`.
pub fn macro_f1_from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> EvalReport {
    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        support[t] += 1;
        pred_count[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision: Vec<f64> = (0..n_classes).map(|c| ratio(tp[c], pred_count[c])).collect();
    let recall: Vec<f64> = (0..n_classes).map(|c| ratio(tp[c], support[c])).collect();
    let f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect();
    let present: Vec<usize> = (0..n_classes).filter(|&c| support[c] > 0).collect();
    let excluded = (0..n_classes).filter(|&c| support[c] == 0).collect();
    let macro_f1 = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|&c| f1[c]).sum::<f64>() / present.len() as f64
    };
    let correct: usize = tp.iter().sum();
    EvalReport {
        macro_f1,
        precision,
        recall,
        f1,
        support,
        excluded,
        accuracy: ratio(correct, truth.len()),
        loss: 0.0,
    }
}

/// Argmax predictions and cross-entropy of `weights` on `indices`.
pub fn evaluate(weights: &ModelWeights, data: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty slice"));
    }
    check_input(weights, data)?;
    let n_out = data.n_classes();
    let mut net = Mlp::<f32>::new(weights.layers());
    let mut predicted = Vec::with_capacity(indices.len());
    let mut loss = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x: Vec<f32> = gather_features(data, chunk);
        let logits = net.forward(weights.params(), &x, chunk.len());
        for (row, &i) in logits.chunks_exact(n_out).zip(chunk) {
            let z: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            let (arg, max) = z.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc },
            );
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[data.labels()[i]];
            predicted.push(arg);
        }
    }
    let truth: Vec<usize> = indices.iter().map(|&i| data.labels()[i]).collect();
    let mut report = macro_f1_from_predictions(&truth, &predicted, n_out);
    report.loss = loss / indices.len() as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = [0, 1, 2, 2, 1];
        let r = macro_f1_from_predictions(&t, &t, 3);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn all_zero_predictions_on_balanced_binary() {
        // class 0: P = 1/2, R = 1, F1 = 2/3; class 1: F1 = 0
        let t = [0, 0, 1, 1];
        let r = macro_f1_from_predictions(&t, &[0, 0, 0, 0], 2);
        assert!((r.f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.f1[1], 0.0);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let t = [3, 3, 3];
        let r = macro_f1_from_predictions(&t, &t, 5);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.excluded, vec![0, 1, 2, 4]);
    }

    #[test]
    fn wrong_prediction_into_absent_class_still_hurts() {
        let t = [0, 0, 0, 0];
        let r = macro_f1_from_predictions(&t, &[0, 0, 0, 1], 2);
        // class 0: P = 1, R = 3/4
        assert!((r.macro_f1 - 6.0 / 7.0).abs() < 1e-15);
        assert!(r.macro_f1 <= 1.0 && r.macro_f1 >= 0.0);
    }
}
