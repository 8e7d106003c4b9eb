//! Size-weighted mutual distillation on one client's data.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{epoch_batches, TrainSettings, Work};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{kl_distill, scaled_sum, KlWeighting, LabelProportions, LossOutput, Teacher};
use crate::nn::Model;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Which participants are updated during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Every participant learns from all others.
    #[default]
    Mutual,
    /// Only the aggregator's model is updated; the rest act as fixed teachers.
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualConfig<T> {
    /// Supervision scale.
    pub gamma: T,
    /// Distillation scale.
    pub alpha: T,
    /// Passes over the aggregator's training split.
    pub epochs: usize,
    pub transfer: TransferMode,
    pub weighting: KlWeighting,
    pub settings: TrainSettings<T>,
}

impl<T: Scalar> MutualConfig<T> {
    /// Opposed scales `(1 - alpha, alpha)`.
    pub fn opposed(alpha: T, epochs: usize, settings: TrainSettings<T>) -> Self {
        Self {
            gamma: T::one() - alpha,
            alpha,
            epochs,
            transfer: TransferMode::Mutual,
            weighting: KlWeighting::SizeWeighted,
            settings,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AggregationReport {
    pub work: Work,
    pub batches: u64,
    /// Set when a lone participant had no teachers.
    pub distillation_skipped: bool,
}

/// Mutual learning among `models` on the aggregator's training rows.
///
/// For every batch all logits are computed first from the current
/// parameters; then each updated model takes one SGD step on
/// `gamma * supervision + alpha * KL(others || self)`, supervision using the
/// aggregator's label proportions.
#[allow(clippy::too_many_arguments)]
pub fn dfml_aggregate<T: Scalar>(
    models: &mut [Model<T>],
    aggregator: usize,
    data: &Dataset<T>,
    indices: &[usize],
    beta: &LabelProportions<T>,
    cfg: &MutualConfig<T>,
    rng: &mut Rng,
) -> Result<AggregationReport> {
    if aggregator >= models.len() {
        return Err(Error::IndexOutOfRange {
            context: "aggregator position",
            index: aggregator,
            bound: models.len(),
        });
    }
    if indices.is_empty() {
        return Err(Error::Empty("aggregator training data"));
    }
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("mutual epochs must be >= 1".into()));
    }
    for scale in [cfg.gamma, cfg.alpha] {
        if !(scale >= T::zero() && scale <= T::one()) {
            return Err(Error::InvalidArgument(format!("loss scale {scale} outside [0, 1]")));
        }
    }

    let phis: Vec<usize> = models.iter().map(Model::param_count).collect();
    let skip_distill = models.len() < 2;
    let mut report = AggregationReport {
        distillation_skipped: skip_distill,
        ..AggregationReport::default()
    };

    for _ in 0..cfg.epochs {
        for batch in epoch_batches(indices, cfg.settings.batch_size, rng) {
            let (x, y) = data.batch(&batch);
            let logits: Vec<Array2<T>> = models
                .par_iter()
                .map(|m| m.forward(x.view()))
                .collect::<Result<_>>()?;
            report.work.forward += logits.len() as u64;
            report.batches += 1;

            let step = |(n, model): (usize, &mut Model<T>)| -> Result<bool> {
                if cfg.transfer == TransferMode::Vanilla && n != aggregator {
                    return Ok(false);
                }
                let loss = participant_loss(n, &logits, &phis, &y, beta, cfg, skip_distill)?;
                let grads = model.backward(x.view(), loss.grad.view())?;
                model.sgd_step(&grads, cfg.settings.sgd)?;
                Ok(true)
            };
            let updated: Vec<bool> = models
                .par_iter_mut()
                .enumerate()
                .map(step)
                .collect::<Result<_>>()?;
            report.work.backward += updated.iter().filter(|&&u| u).count() as u64;
        }
    }
    Ok(report)
}

fn participant_loss<T: Scalar>(
    n: usize,
    logits: &[Array2<T>],
    phis: &[usize],
    labels: &[usize],
    beta: &LabelProportions<T>,
    cfg: &MutualConfig<T>,
    skip_distill: bool,
) -> Result<LossOutput<T>> {
    let own = logits[n].view();
    let supervision = cfg.settings.supervision.evaluate(own, labels, beta)?;
    if skip_distill || cfg.alpha == T::zero() {
        let grad = supervision.grad.mapv(|g| cfg.gamma * g);
        return Ok(LossOutput {
            loss: cfg.gamma * supervision.loss,
            grad,
        });
    }
    let teachers: Vec<Teacher<'_, T>> = logits
        .iter()
        .zip(phis)
        .enumerate()
        .filter(|&(q, _)| q != n)
        .map(|(_, (z, &phi))| Teacher { logits: z.view(), phi })
        .collect();
    let distillation = kl_distill(own, &teachers, cfg.settings.temperature, cfg.weighting)?;
    scaled_sum(cfg.gamma, &supervision, cfg.alpha, &distillation)
}

/// Two-model exchange: the incoming model and the receiver's model learn
/// mutually on the receiver's data, then the receiver adopts the updated
/// incoming model. Both arguments end holding the updated incoming model.
#[allow(clippy::too_many_arguments)]
pub fn defkt_exchange<T: Scalar>(
    incoming: &mut Model<T>,
    local: &mut Model<T>,
    data: &Dataset<T>,
    indices: &[usize],
    beta: &LabelProportions<T>,
    cfg: &MutualConfig<T>,
    rng: &mut Rng,
) -> Result<AggregationReport> {
    if !incoming.same_architecture(local) {
        return Err(Error::ArchitectureMismatch(
            "knowledge transfer pairs must share an architecture".into(),
        ));
    }
    let mut pair = [incoming.clone(), local.clone()];
    let mut cfg = *cfg;
    cfg.transfer = TransferMode::Mutual;
    let report = dfml_aggregate(&mut pair, 1, data, indices, beta, &cfg, rng)?;
    let [updated, _] = pair;
    *local = updated.clone();
    *incoming = updated;
    Ok(report)
}

/// Mutual learning between a client's own model and its meme model on the
/// client's own data.
#[allow(clippy::too_many_arguments)]
pub fn fml_local_mutual<T: Scalar>(
    regular: &mut Model<T>,
    meme: &mut Model<T>,
    data: &Dataset<T>,
    indices: &[usize],
    beta: &LabelProportions<T>,
    cfg: &MutualConfig<T>,
    rng: &mut Rng,
) -> Result<AggregationReport> {
    let mut pair = [regular.clone(), meme.clone()];
    let mut cfg = *cfg;
    cfg.transfer = TransferMode::Mutual;
    let report = dfml_aggregate(&mut pair, 0, data, indices, beta, &cfg, rng)?;
    let [r, m] = pair;
    *regular = r;
    *meme = m;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::losses::Supervision;
    use crate::nn::{ModelSpec, Sgd};
    use crate::rng::{derive, Stream};

    fn settings(lr: f64) -> TrainSettings<f64> {
        TrainSettings {
            sgd: Sgd { lr, momentum: 0.9, weight_decay: 0.0 },
            batch_size: 8,
            temperature: 1.0,
            supervision: Supervision::Wsm,
        }
    }

    fn setup() -> (Dataset<f64>, Vec<usize>, LabelProportions<f64>, Vec<Model<f64>>) {
        let data = synth_blobs::<f64>(3, 4, 10, 0.5, 1).unwrap();
        let idx: Vec<usize> = (0..30).collect();
        let beta = data.label_proportions(&idx).unwrap();
        let models = vec![
            Model::init(&ModelSpec::new(vec![6], 4, 3).unwrap(), 1).unwrap(),
            Model::init(&ModelSpec::new(vec![4, 4], 4, 3).unwrap(), 1).unwrap(),
            Model::init(&ModelSpec::new(vec![3], 4, 3).unwrap(), 1).unwrap(),
        ];
        (data, idx, beta, models)
    }

    #[test]
    fn identical_models_alpha_one_do_not_move() {
        let (data, idx, beta, models) = setup();
        let mut pair = vec![models[0].clone(), models[0].clone()];
        let cfg = MutualConfig::opposed(1.0, 2, settings(0.1));
        let mut rng = derive(0, Stream::Aggregation, &[]);
        dfml_aggregate(&mut pair, 0, &data, &idx, &beta, &cfg, &mut rng).unwrap();
        assert_eq!(pair[0].flat_params(), models[0].flat_params());
        assert_eq!(pair[1].flat_params(), models[0].flat_params());
    }

    #[test]
    fn zero_lr_ignores_epochs() {
        let (data, idx, beta, models) = setup();
        for k in [1, 2, 4] {
            let mut ms = models.clone();
            let cfg = MutualConfig::opposed(0.5, k, settings(0.0));
            let mut rng = derive(0, Stream::Aggregation, &[]);
            let report = dfml_aggregate(&mut ms, 0, &data, &idx, &beta, &cfg, &mut rng).unwrap();
            assert_eq!(report.work.backward, 3 * 4 * k as u64);
            for (a, b) in ms.iter().zip(&models) {
                assert_eq!(a.flat_params(), b.flat_params());
            }
        }
    }

    #[test]
    fn vanilla_leaves_senders_untouched() {
        let (data, idx, beta, models) = setup();
        let mut mutual = models.clone();
        let mut vanilla = models.clone();
        let mut cfg = MutualConfig::opposed(0.5, 1, settings(0.1));
        let mut rng = derive(0, Stream::Aggregation, &[]);
        dfml_aggregate(&mut mutual, 0, &data, &idx, &beta, &cfg, &mut rng).unwrap();
        cfg.transfer = TransferMode::Vanilla;
        let mut rng = derive(0, Stream::Aggregation, &[]);
        dfml_aggregate(&mut vanilla, 0, &data, &idx, &beta, &cfg, &mut rng).unwrap();
        assert_ne!(vanilla[0], models[0]);
        assert_eq!(vanilla[1], models[1]);
        assert_eq!(vanilla[2], models[2]);
        assert_ne!(mutual[1], models[1]);
    }

    #[test]
    fn lone_participant_skips_distillation() {
        let (data, idx, beta, models) = setup();
        let mut one = vec![models[0].clone()];
        let cfg = MutualConfig::opposed(0.5, 1, settings(0.1));
        let mut rng = derive(0, Stream::Aggregation, &[]);
        let report = dfml_aggregate(&mut one, 0, &data, &idx, &beta, &cfg, &mut rng).unwrap();
        assert!(report.distillation_skipped);
    }

    #[test]
    fn argument_validation() {
        let (data, idx, beta, mut models) = setup();
        let cfg = MutualConfig::opposed(0.5, 1, settings(0.1));
        let mut rng = derive(0, Stream::Aggregation, &[]);
        assert!(dfml_aggregate(&mut models, 5, &data, &idx, &beta, &cfg, &mut rng).is_err());
        assert!(dfml_aggregate(&mut models, 0, &data, &[], &beta, &cfg, &mut rng).is_err());
        let mut bad = cfg;
        bad.alpha = 1.5;
        assert!(dfml_aggregate(&mut models, 0, &data, &idx, &beta, &bad, &mut rng).is_err());
        bad = cfg;
        bad.epochs = 0;
        assert!(dfml_aggregate(&mut models, 0, &data, &idx, &beta, &bad, &mut rng).is_err());
    }

    #[test]
    fn defkt_replacement_semantics() {
        let (data, idx, beta, models) = setup();
        let mut rng = derive(0, Stream::Aggregation, &[]);
        let cfg = MutualConfig::opposed(0.5, 1, settings(0.0));
        let mut incoming = models[0].clone();
        let mut local = Model::init(models[0].spec(), 99).unwrap();
        defkt_exchange(&mut incoming, &mut local, &data, &idx, &beta, &cfg, &mut rng).unwrap();
        assert_eq!(local, incoming);
        assert_eq!(local.flat_params(), models[0].flat_params());

        let cfg = MutualConfig::opposed(1.0, 2, settings(0.1));
        let mut a = models[0].clone();
        let mut b = models[0].clone();
        defkt_exchange(&mut a, &mut b, &data, &idx, &beta, &cfg, &mut rng).unwrap();
        assert_eq!(a.flat_params(), models[0].flat_params());

        let mut other = models[1].clone();
        assert!(matches!(
            defkt_exchange(&mut a, &mut other, &data, &idx, &beta, &cfg, &mut rng),
            Err(Error::ArchitectureMismatch(_))
        ));
    }
}
