//! Partial training: sub-models carved out of the largest model by
//! per-layer unit index sets, and coverage-weighted aggregation back into it.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, Model, ModelSpec};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// How hidden-unit index sets are chosen for a sub-model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexScheme {
    Dropout,
    HeteroFl,
    FedRolex,
}

/// `floor(r * J)`, tolerant of rates that are not exact in binary.
pub fn index_capacity(r: f64, width: usize) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("model rate {r} outside (0, 1]")));
    }
    let k = (r * width as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::InvalidArgument(format!(
            "rate {r} leaves no units of a width-{width} layer"
        )));
    }
    Ok(k.min(width))
}

/// `floor(r * J)` indices drawn uniformly without replacement, sorted.
pub fn dropout_indices(r: f64, width: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let k = index_capacity(r, width)?;
    let mut set = index::sample(rng, width, k).into_vec();
    set.sort_unstable();
    Ok(set)
}

/// The leading `floor(r * J)` indices.
pub fn heterofl_indices(r: f64, width: usize) -> Result<Vec<usize>> {
    Ok((0..index_capacity(r, width)?).collect())
}

/// A window of `floor(r * J)` consecutive indices starting at `t mod J`,
/// wrapping past the end of the layer.
pub fn fedrolex_indices(r: f64, width: usize, t: usize) -> Result<Vec<usize>> {
    let k = index_capacity(r, width)?;
    let start = t % width;
    Ok((start..start + k).map(|i| i % width).collect())
}

/// Hidden-layer output-unit index sets of one sub-model within the global model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSets {
    pub per_layer: Vec<Vec<usize>>,
}

impl IndexSets {
    /// Full sets for every hidden layer of `spec`.
    pub fn full(spec: &ModelSpec) -> Self {
        Self {
            per_layer: spec.layer_widths.iter().map(|&w| (0..w).collect()).collect(),
        }
    }

    /// Index sets of `sub` inside `global`, with the model rate taken from
    /// the first hidden layer.
    ///
    /// Errors unless `sub` is exactly the rate-scaled version of `global`.
    pub fn assign(
        scheme: IndexScheme,
        sub: &ModelSpec,
        global: &ModelSpec,
        round: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let rate = model_rate(sub, global)?;
        let per_layer = global
            .layer_widths
            .iter()
            .map(|&j| match scheme {
                IndexScheme::Dropout => dropout_indices(rate, j, rng),
                IndexScheme::HeteroFl => heterofl_indices(rate, j),
                IndexScheme::FedRolex => fedrolex_indices(rate, j, round),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { per_layer })
    }

    /// `(out, in)` unit selections of every affine layer, output layer last.
    fn layer_selections(&self, global: &ModelSpec) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut inputs: Vec<usize> = (0..global.input_dim).collect();
        let mut out = Vec::with_capacity(self.per_layer.len() + 1);
        for set in &self.per_layer {
            out.push((set.clone(), inputs));
            inputs = set.clone();
        }
        out.push(((0..global.num_classes).collect(), inputs));
        out
    }

    fn check(&self, sub: &ModelSpec, global: &ModelSpec) -> Result<()> {
        let depth_ok = self.per_layer.len() == global.layer_widths.len()
            && sub.layer_widths.len() == global.layer_widths.len();
        if !depth_ok || sub.input_dim != global.input_dim || sub.num_classes != global.num_classes {
            return Err(Error::ArchitectureMismatch(format!(
                "{:?} is not a width-scaled sub-model of {:?}",
                sub.layer_widths, global.layer_widths
            )));
        }
        for ((set, &w), &j) in self.per_layer.iter().zip(&sub.layer_widths).zip(&global.layer_widths) {
            if set.len() != w {
                return Err(Error::shape("index set", w, set.len()));
            }
            if let Some(&bad) = set.iter().find(|&&i| i >= j) {
                return Err(Error::IndexOutOfRange {
                    context: "index set",
                    index: bad,
                    bound: j,
                });
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(Error::InvalidArgument("index set has duplicates".into()));
            }
        }
        Ok(())
    }
}

/// Width ratio of `sub` to `global`, verified against every hidden layer.
pub(crate) fn model_rate(sub: &ModelSpec, global: &ModelSpec) -> Result<f64> {
    let mismatch = || {
        Error::ArchitectureMismatch(format!(
            "{:?} is not a width-scaled sub-model of {:?}",
            sub.layer_widths, global.layer_widths
        ))
    };
    if sub.layer_widths.len() != global.layer_widths.len()
        || sub.input_dim != global.input_dim
        || sub.num_classes != global.num_classes
    {
        return Err(mismatch());
    }
    let rate = sub.layer_widths[0] as f64 / global.layer_widths[0] as f64;
    for (&w, &j) in sub.layer_widths.iter().zip(&global.layer_widths) {
        if index_capacity(rate, j).ok() != Some(w) {
            return Err(mismatch());
        }
    }
    Ok(rate)
}

/// Extract the sub-model parameters of `global` selected by `sets` into a
/// copy of `template` (whose momentum buffers are kept).
pub fn extract_submodel<T: Scalar>(global: &Model<T>, sets: &IndexSets, template: &Model<T>) -> Result<Model<T>> {
    sets.check(template.spec(), global.spec())?;
    let mut sub = template.clone();
    for (layer, (out_idx, in_idx)) in sets.layer_selections(global.spec()).iter().enumerate() {
        let slice = global.layer_slice(layer, out_idx, in_idx)?;
        sub.layers_mut()[layer] = slice;
    }
    Ok(sub)
}

/// Average sub-models into `global`: every covered parameter becomes the
/// unweighted mean over the models covering it, uncovered parameters keep
/// their value. Returns the new global and each model re-extracted from it.
pub fn pt_aggregate<T: Scalar>(
    global: &Model<T>,
    models: &[Model<T>],
    sets: &[IndexSets],
) -> Result<(Model<T>, Vec<Model<T>>)> {
    if models.len() != sets.len() {
        return Err(Error::shape("index sets", models.len(), sets.len()));
    }
    let gspec = global.spec();
    let zeros = || -> Vec<Dense<T>> {
        gspec
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Dense::zeros(o, i))
            .collect()
    };
    let mut sums = zeros();
    let mut counts = zeros();

    for (model, set) in models.iter().zip(sets) {
        set.check(model.spec(), gspec)?;
        for (layer, (out_idx, in_idx)) in set.layer_selections(gspec).iter().enumerate() {
            let src = &model.layers()[layer];
            let (sum, count) = (&mut sums[layer], &mut counts[layer]);
            for (r, &o) in out_idx.iter().enumerate() {
                for (c, &i) in in_idx.iter().enumerate() {
                    sum.weight[[o, i]] += src.weight[[r, c]];
                    count.weight[[o, i]] += T::one();
                }
                sum.bias[o] += src.bias[r];
                count.bias[o] += T::one();
            }
        }
    }

    let mut updated = global.clone();
    for ((dst, sum), count) in updated.layers_mut().iter_mut().zip(&sums).zip(&counts) {
        let pairs = dst
            .weight
            .iter_mut()
            .zip(sum.weight.iter().zip(count.weight.iter()))
            .chain(dst.bias.iter_mut().zip(sum.bias.iter().zip(count.bias.iter())));
        for (d, (&s, &n)) in pairs {
            if n > T::zero() {
                *d = s / n;
            }
        }
    }

    let refreshed = models
        .iter()
        .zip(sets)
        .map(|(m, set)| extract_submodel(&updated, set, m))
        .collect::<Result<Vec<_>>>()?;
    Ok((updated, refreshed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::fedavg_aggregate;
    use crate::rng::{derive, Stream};

    #[test]
    fn scheme_examples() {
        assert_eq!(heterofl_indices(0.5, 4).unwrap(), vec![0, 1]);
        assert_eq!(heterofl_indices(1.0, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(heterofl_indices(0.25, 64).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(fedrolex_indices(0.5, 4, 3).unwrap(), vec![3, 0]);
        assert_eq!(fedrolex_indices(0.5, 4, 5).unwrap(), vec![1, 2]);
        assert_eq!(fedrolex_indices(0.5, 4, 0).unwrap(), heterofl_indices(0.5, 4).unwrap());
        let mut rng = derive(0, Stream::Indices, &[]);
        assert_eq!(dropout_indices(1.0, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        let d = dropout_indices(0.5, 4, &mut rng).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d[0] < d[1] && d[1] < 4);
    }

    #[test]
    fn degenerate_rates_error() {
        assert!(heterofl_indices(0.1, 4).is_err());
        assert!(heterofl_indices(0.0, 4).is_err());
        assert!(heterofl_indices(1.5, 4).is_err());
        let mut rng = derive(0, Stream::Indices, &[]);
        assert!(dropout_indices(0.2, 4, &mut rng).is_err());
        assert!(fedrolex_indices(0.2, 4, 1).is_err());
    }

    #[test]
    fn inexact_rates_floor_as_intended() {
        assert_eq!(index_capacity(0.29, 100).unwrap(), 29);
        assert_eq!(index_capacity(0.7, 10).unwrap(), 7);
        assert_eq!(index_capacity(0.5, 5).unwrap(), 2);
    }

    #[test]
    fn dropout_frequencies_near_rate() {
        let mut rng = derive(1, Stream::Indices, &[]);
        let (r, j, draws) = (0.25, 8, 10_000);
        let mut hits = [0usize; 8];
        for _ in 0..draws {
            for i in dropout_indices(r, j, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        let sigma = (draws as f64 * r * (1.0 - r)).sqrt();
        for h in hits {
            assert!((h as f64 - draws as f64 * r).abs() < 3.0 * sigma, "{h}");
        }
    }

    fn spec(widths: Vec<usize>) -> ModelSpec {
        ModelSpec::new(widths, 3, 2).unwrap()
    }

    #[test]
    fn assign_rejects_non_scaled_models() {
        let mut rng = derive(0, Stream::Indices, &[]);
        let g = spec(vec![8, 4]);
        assert!(IndexSets::assign(IndexScheme::HeteroFl, &spec(vec![4, 2]), &g, 0, &mut rng).is_ok());
        assert!(IndexSets::assign(IndexScheme::HeteroFl, &spec(vec![4, 3]), &g, 0, &mut rng).is_err());
        assert!(IndexSets::assign(IndexScheme::HeteroFl, &spec(vec![4]), &g, 0, &mut rng).is_err());
    }

    #[test]
    fn full_coverage_matches_fedavg() {
        let s = spec(vec![5, 4]);
        let models: Vec<Model<f64>> = (0..3).map(|k| Model::init(&s, k).unwrap()).collect();
        let sets = vec![IndexSets::full(&s); 3];
        let (global, subs) = pt_aggregate(&models[0], &models, &sets).unwrap();
        let avg = fedavg_aggregate(&models, &[1.0; 3]).unwrap();
        for (a, b) in global.flat_params().iter().zip(avg[0].flat_params()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(subs[1].flat_params(), global.flat_params());
    }

    #[test]
    fn partial_coverage_brute_force() {
        let big_spec = spec(vec![2]);
        let small_spec = spec(vec![1]);
        let big = Model::<f64>::init(&big_spec, 1).unwrap();
        let small = Model::<f64>::init(&small_spec, 2).unwrap();
        let sets = vec![IndexSets::full(&big_spec), IndexSets { per_layer: vec![vec![0]] }];
        let (global, subs) = pt_aggregate(&big, &[big.clone(), small.clone()], &sets).unwrap();

        let (b0, s0) = (&big.layers()[0], &small.layers()[0]);
        let g0 = &global.layers()[0];
        for i in 0..3 {
            assert_eq!(g0.weight[[0, i]], (b0.weight[[0, i]] + s0.weight[[0, i]]) / 2.0);
            assert_eq!(g0.weight[[1, i]], b0.weight[[1, i]]);
        }
        assert_eq!(g0.bias[1], b0.bias[1]);
        let (b1, s1, g1) = (&big.layers()[1], &small.layers()[1], &global.layers()[1]);
        for o in 0..2 {
            assert_eq!(g1.weight[[o, 0]], (b1.weight[[o, 0]] + s1.weight[[o, 0]]) / 2.0);
            assert_eq!(g1.weight[[o, 1]], b1.weight[[o, 1]]);
            assert_eq!(g1.bias[o], (b1.bias[o] + s1.bias[o]) / 2.0);
        }
        assert_eq!(subs[1].layers()[0].weight[[0, 2]], g0.weight[[0, 2]]);
        assert_eq!(subs[1].spec(), &small_spec);
    }

    #[test]
    fn uncovered_units_keep_global_values() {
        let g = Model::<f64>::init(&spec(vec![4]), 1).unwrap();
        let small = Model::<f64>::init(&spec(vec![2]), 2).unwrap();
        let sets = vec![IndexSets { per_layer: vec![vec![3, 0]] }];
        let (global, subs) = pt_aggregate(&g, std::slice::from_ref(&small), &sets).unwrap();
        assert_eq!(global.layers()[0].weight.row(1), g.layers()[0].weight.row(1));
        assert_eq!(global.layers()[0].weight.row(3), small.layers()[0].weight.row(0));
        assert_eq!(subs[0].flat_params(), small.flat_params());
    }

    #[test]
    fn out_of_range_sets_error() {
        let g = Model::<f64>::init(&spec(vec![4]), 1).unwrap();
        let small = Model::<f64>::init(&spec(vec![2]), 2).unwrap();
        let sets = vec![IndexSets { per_layer: vec![vec![3, 4]] }];
        assert!(pt_aggregate(&g, std::slice::from_ref(&small), &sets).is_err());
        let dup = vec![IndexSets { per_layer: vec![vec![1, 1]] }];
        assert!(pt_aggregate(&g, &[small], &dup).is_err());
    }
}
