//! Per-round building blocks of every protocol: local training, mutual
//! distillation at the aggregator, peak snapshots, and the averaging
//! baselines.

mod averaging;
mod mutual;
mod partial;

pub use averaging::fedavg_aggregate;
pub use mutual::{defkt_exchange, dfml_aggregate, fml_local_mutual, AggregationReport, MutualConfig, TransferMode};
pub use partial::{
    dropout_indices, extract_submodel, fedrolex_indices, heterofl_indices, index_capacity, pt_aggregate, IndexScheme,
    IndexSets,
};
pub(crate) use partial::model_rate;

use std::ops::AddAssign;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{prox_term, LabelProportions, Supervision};
use crate::nn::{Model, Sgd};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::schedule::AlphaSchedule;
use crate::topology::ClientId;

/// Forward and backward pass counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    pub forward: u64,
    pub backward: u64,
}

impl AddAssign for Work {
    fn add_assign(&mut self, rhs: Self) {
        self.forward += rhs.forward;
        self.backward += rhs.backward;
    }
}

impl std::iter::Sum for Work {
    fn sum<I: Iterator<Item = Work>>(iter: I) -> Self {
        let mut total = Work::default();
        for w in iter {
            total += w;
        }
        total
    }
}

/// Optimizer and loss settings shared by local and aggregation training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings<T> {
    pub sgd: Sgd<T>,
    pub batch_size: usize,
    pub temperature: T,
    pub supervision: Supervision,
}

/// A client's models, data handle and peak watermark.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState<T> {
    pub id: ClientId,
    pub regular: Model<T>,
    pub peak: Model<T>,
    pub watermark: f64,
    /// Training rows of the shared pool.
    pub train: Vec<usize>,
    /// Validation rows of the shared pool.
    pub val: Vec<usize>,
    /// Label proportions of `train`.
    pub beta: LabelProportions<T>,
    pub meme: Option<Model<T>>,
    pub anchor: Option<Model<T>>,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(id: ClientId, model: Model<T>, train: Vec<usize>, val: Vec<usize>, pool: &Dataset<T>) -> Result<Self> {
        let beta = pool.label_proportions(&train)?;
        Ok(Self {
            id,
            peak: model.clone(),
            regular: model,
            watermark: 0.0,
            train,
            val,
            beta,
            meme: None,
            anchor: None,
        })
    }
}

/// Shuffled mini-batches covering `indices` once.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mini-batch SGD on `indices` of `data` for `epochs` passes.
///
/// With `prox = Some((anchor, mu))` the proximal gradient `mu (w - anchor)`
/// is added at every step.
#[allow(clippy::too_many_arguments)]
pub fn local_train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    indices: &[usize],
    beta: &LabelProportions<T>,
    epochs: usize,
    settings: &TrainSettings<T>,
    prox: Option<(&Model<T>, T)>,
    rng: &mut Rng,
) -> Result<Work> {
    if indices.is_empty() {
        return Err(Error::Empty("local training data"));
    }
    let mut work = Work::default();
    for _ in 0..epochs {
        for batch in epoch_batches(indices, settings.batch_size, rng) {
            let (x, y) = data.batch(&batch);
            let logits = model.forward(x.view())?;
            let loss = settings.supervision.evaluate(logits.view(), &y, beta)?;
            let mut grads = model.backward(x.view(), loss.grad.view())?;
            if let Some((anchor, mu)) = prox {
                let (_, prox_grads) = prox_term(model, anchor, mu)?;
                grads.add_scaled(T::one(), &prox_grads)?;
            }
            model.sgd_step(&grads, settings.sgd)?;
            work.forward += 1;
            work.backward += 1;
        }
    }
    Ok(work)
}

/// Local training of a client's regular model on its own training split,
/// using the stored anchor when `mu` is given.
pub fn local_train_client<T: Scalar>(
    client: &mut ClientState<T>,
    data: &Dataset<T>,
    epochs: usize,
    settings: &TrainSettings<T>,
    mu: Option<T>,
    rng: &mut Rng,
) -> Result<Work> {
    let ClientState {
        regular,
        train,
        beta,
        anchor,
        ..
    } = client;
    let prox = match mu {
        Some(mu) => Some((anchor.as_ref().ok_or(Error::Empty("proximal anchor"))?, mu)),
        None => None,
    };
    local_train(regular, data, train, beta, epochs, settings, prox, rng)
}

/// Snapshot the regular model into the peak slot when the round's weight
/// reaches the client's watermark, or (when `relaxed_m > 1`) when the
/// schedule sits in the top `relaxed_m` positions of its cycle.
///
/// Returns whether the snapshot fired.
pub fn peak_update<T: Scalar>(
    client: &mut ClientState<T>,
    alpha_t: f64,
    relaxed_m: usize,
    schedule: &AlphaSchedule,
) -> bool {
    let fire = alpha_t >= client.watermark || (relaxed_m > 1 && schedule.is_peak_round(relaxed_m));
    if fire {
        client.peak.clone_from(&client.regular);
        client.watermark = client.watermark.max(alpha_t);
    }
    fire
}
