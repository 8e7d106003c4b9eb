//! Per-round measurements and accuracy helpers.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::nn::Model;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 0 for the evaluation before training.
    pub round: usize,
    pub alpha: f64,
    /// Client that aggregated this round; `None` for round 0, hub rounds and pairwise exchanges.
    pub aggregator: Option<usize>,
    pub participants: usize,
    /// Model transfers this round.
    pub comm_cost: u64,
    /// Model transfers since the start.
    pub comm_total: u64,
    /// Forward plus backward passes since the start.
    pub compute_cost: u64,
    pub distill_skipped: bool,
    pub regular_acc: Vec<f64>,
    pub peak_acc: Vec<f64>,
    pub regular_mean: f64,
    pub peak_mean: f64,
    /// Mean regular-model accuracy on the clients' validation splits.
    pub local_mean: f64,
    pub cluster_regular: Vec<f64>,
    pub cluster_peak: Vec<f64>,
    /// Mean global accuracy of the meme models (`dec_fml` only).
    pub meme_mean: Option<f64>,
}

/// Which model's accuracy a query reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reported {
    #[default]
    Peak,
    Regular,
}

impl RoundMetrics {
    pub fn mean(&self, which: Reported) -> f64 {
        match which {
            Reported::Peak => self.peak_mean,
            Reported::Regular => self.regular_mean,
        }
    }
}

/// Top-1 accuracy of `model` on `rows` of `data` (all rows when `None`).
pub fn accuracy<T: Scalar>(model: &Model<T>, data: &Dataset<T>, rows: Option<&[usize]>) -> Result<f64> {
    let (features, labels) = match rows {
        Some([]) => return Err(Error::Empty("evaluation rows")),
        Some(r) => data.batch(r),
        None => (data.features().clone(), data.labels().to_vec()),
    };
    let logits = model.forward(features.view())?;
    let correct = logits
        .axis_iter(Axis(0))
        .zip(&labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Top-1 accuracy on the full global test set.
pub fn eval_global<T: Scalar>(model: &Model<T>, test: &Dataset<T>) -> Result<f64> {
    accuracy(model, test, None)
}

/// First trained round whose mean accuracy reaches `target`.
pub fn rounds_to_accuracy(metrics: &[RoundMetrics], target: f64, which: Reported) -> Option<usize> {
    metrics
        .iter()
        .filter(|m| m.round > 0)
        .find(|m| m.mean(which) >= target)
        .map(|m| m.round)
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use ndarray::{array, Array2};

    fn row(round: usize, peak: f64) -> RoundMetrics {
        RoundMetrics {
            round,
            alpha: 0.0,
            aggregator: None,
            participants: 0,
            comm_cost: 0,
            comm_total: 0,
            compute_cost: 0,
            distill_skipped: false,
            regular_acc: vec![],
            peak_acc: vec![],
            regular_mean: peak / 2.0,
            peak_mean: peak,
            local_mean: 0.0,
            cluster_regular: vec![],
            cluster_peak: vec![],
            meme_mean: None,
        }
    }

    #[test]
    fn rounds_to_accuracy_first_crossing() {
        let ms: Vec<_> = [0.1, 0.2, 0.4, 0.6, 0.8].iter().enumerate().map(|(r, &a)| row(r, a)).collect();
        assert_eq!(rounds_to_accuracy(&ms, 0.0, Reported::Peak), Some(1));
        assert_eq!(rounds_to_accuracy(&ms, 0.5, Reported::Peak), Some(3));
        assert_eq!(rounds_to_accuracy(&ms, 0.5, Reported::Regular), None);
        assert_eq!(rounds_to_accuracy(&ms, 0.9, Reported::Peak), None);
    }

    #[test]
    fn constant_logits_pick_class_zero() {
        let spec = ModelSpec::new(vec![2], 2, 3).unwrap();
        let model = Model::<f64>::zeros(&spec).unwrap();
        let x: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let data = Dataset::new(x, vec![0, 1, 2], 3).unwrap();
        assert!((eval_global(&model, &data).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shift_invariant_and_pure() {
        let spec = ModelSpec::new(vec![4], 2, 3).unwrap();
        let model = Model::<f64>::init(&spec, 3).unwrap();
        let data = crate::data::synth_blobs::<f64>(3, 2, 20, 0.3, 1).unwrap();
        let before = model.clone();
        let a = eval_global(&model, &data).unwrap();
        let mut shifted = model.clone();
        let last = shifted.layers_mut().last_mut().unwrap();
        last.bias.mapv_inplace(|b| b + 7.5);
        assert_eq!(eval_global(&shifted, &data).unwrap(), a);
        assert_eq!(model, before);
    }
}
