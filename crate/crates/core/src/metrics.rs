//! Accuracy and consensus metrics.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::fsadmm::ByteCounter;
use crate::linalg::Matrix;
use crate::math;
use crate::nnmodel::{argmax, ModelError, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_device_acc: Vec<f64>,
    pub avg_acc: f64,
    /// Max minus min device accuracy.
    pub acc_gap: f64,
    pub consensus_dist: f64,
    pub cum_bytes_outputs: u64,
    pub cum_bytes_params: u64,
}

impl Metrics {
    pub fn from_parts(per_device_acc: Vec<f64>, consensus_dist: f64, bytes: ByteCounter) -> Self {
        let (avg_acc, acc_gap) = summarize(&per_device_acc);
        Self {
            per_device_acc,
            avg_acc,
            acc_gap,
            consensus_dist,
            cum_bytes_outputs: bytes.outputs,
            cum_bytes_params: bytes.params,
        }
    }
}

/// `(mean, max - min)` of per-device accuracies.
pub fn summarize(accs: &[f64]) -> (f64, f64) {
    if accs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    (mean, max - min)
}

/// Fraction of `test` samples whose argmax prediction matches the label.
pub fn accuracy(model: &ModelState, test: &Dataset) -> Result<f64, ModelError> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let mut ws = model.workspace();
    let mut correct = 0usize;
    for i in 0..test.len() {
        model.forward_ws(test.input(i), &mut ws)?;
        if argmax(ws.probs()) == test.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean over shared samples of the mean pairwise L2 distance between device
/// output vectors. Zero exactly when all devices agree on every sample.
pub fn consensus_distance(outputs: &[Matrix]) -> f64 {
    let n = outputs.len();
    if n < 2 {
        return 0.0;
    }
    let samples = outputs[0].rows();
    if samples == 0 {
        return 0.0;
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let mut total = 0.0;
    for s in 0..samples {
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d: f64 = outputs[i]
                    .row(s)
                    .iter()
                    .zip(outputs[j].row(s))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                acc += math::sqrt(d);
            }
        }
        total += acc / pairs;
    }
    total / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn gap_and_mean() {
        let (m, g) = summarize(&[0.5, 0.9, 0.7]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((g - 0.4).abs() < 1e-15);
        assert_eq!(summarize(&[0.3, 0.3]), (0.3, 0.0));
    }

    #[test]
    fn consensus_of_identical_outputs_is_zero() {
        let m = Matrix::from_vec(2, 2, vec![0.1, 0.9, 0.4, 0.6]);
        assert_eq!(consensus_distance(&[m.clone(), m.clone(), m]), 0.0);
    }

    #[test]
    fn consensus_of_two_devices() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let b = Matrix::from_vec(1, 2, vec![0.0, 1.0]);
        assert!((consensus_distance(&[a, b]) - core::f64::consts::SQRT_2).abs() < 1e-15);
    }
}
