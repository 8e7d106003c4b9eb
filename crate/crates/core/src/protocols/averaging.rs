//! Sample-weighted parameter averaging within architecture clusters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec};
use crate::scalar::Scalar;

/// Weighted mean of every same-architecture cluster in `models`.
///
/// Returns one model per input, each holding its cluster's average
/// parameters; momentum buffers of the inputs are kept.
pub fn fedavg_aggregate<T: Scalar>(models: &[Model<T>], weights: &[T]) -> Result<Vec<Model<T>>> {
    if models.len() != weights.len() {
        return Err(Error::shape("averaging weights", models.len(), weights.len()));
    }
    if models.is_empty() {
        return Err(Error::Empty("models to average"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > T::zero() && w.is_finite())) {
        return Err(Error::InvalidArgument(format!("averaging weight {w} must be positive")));
    }

    let mut clusters: HashMap<&ModelSpec, Vec<usize>> = HashMap::new();
    for (n, m) in models.iter().enumerate() {
        clusters.entry(m.spec()).or_default().push(n);
    }

    let mut out = models.to_vec();
    for members in clusters.values() {
        let total: T = members.iter().map(|&n| weights[n]).sum();
        let mut mean = vec![T::zero(); models[members[0]].param_count()];
        for &n in members {
            let d = weights[n] / total;
            for (acc, &p) in mean.iter_mut().zip(&models[n].flat_params()) {
                *acc += d * p;
            }
        }
        for &n in members {
            out[n].set_flat_params(&mean)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(v: f64) -> Model<f64> {
        let spec = ModelSpec::new(vec![1], 1, 1).unwrap();
        let mut m = Model::zeros(&spec).unwrap();
        m.set_flat_params(&[v, 0.0, 0.0, 0.0]).unwrap();
        m
    }

    #[test]
    fn mean_of_two() {
        let out = fedavg_aggregate(&[scalar_model(1.0), scalar_model(3.0)], &[1.0, 1.0]).unwrap();
        assert_eq!(out[0].flat_params()[0], 2.0);
        assert_eq!(out[1].flat_params()[0], 2.0);
    }

    #[test]
    fn weighted_three() {
        let ms = [scalar_model(1.0), scalar_model(2.0), scalar_model(5.0)];
        let out = fedavg_aggregate(&ms, &[1.0, 1.0, 2.0]).unwrap();
        assert!((out[2].flat_params()[0] - 13.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn clusters_stay_separate() {
        let wide = Model::<f64>::init(&ModelSpec::new(vec![4], 2, 2).unwrap(), 3).unwrap();
        let ms = vec![scalar_model(1.0), wide.clone(), scalar_model(3.0)];
        let out = fedavg_aggregate(&ms, &[1.0, 5.0, 1.0]).unwrap();
        assert_eq!(out[1].flat_params(), wide.flat_params());
        assert_eq!(out[0].flat_params()[0], 2.0);
    }

    #[test]
    fn rejects_bad_weights() {
        let ms = [scalar_model(1.0)];
        assert!(fedavg_aggregate(&ms, &[0.0]).is_err());
        assert!(fedavg_aggregate(&ms, &[1.0, 1.0]).is_err());
    }
}
