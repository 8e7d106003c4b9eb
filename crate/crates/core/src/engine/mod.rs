//! The round loop: planning, local training, aggregation, peak snapshots,
//! scheduling and evaluation.

mod config;
mod metrics;

pub use config::{
    DataSource, DatasetConfig, ExperimentConfig, ModelsConfig, PartitionKind, Precision, ProtocolConfig, ProtocolKind,
    SchedulerConfig, TopologyConfig, REQUIRED_KEYS,
};
pub use metrics::{accuracy, eval_global, rounds_to_accuracy, Reported, RoundMetrics};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{dirichlet_partition, iid_partition, load_csv, load_idx, synth_blobs, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec, Sgd};
use crate::protocols::{
    defkt_exchange, dfml_aggregate, fedavg_aggregate, fml_local_mutual, local_train_client, peak_update, pt_aggregate,
    ClientState, IndexSets, MutualConfig, TrainSettings, Work,
};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::schedule::{AlphaSchedule, CycleState, ScheduleMode, SchedulerHandoff};
use crate::topology::{next_aggregator, select_clients, select_pairs, select_senders, AggregatorMode, ClientId, Topology};
use metrics::mean;

/// A party in a model transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    Client(ClientId),
    Hub,
}

/// What travels between parties. Only models exist here: there is no way to
/// log, and therefore no way to send, raw samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Model,
    SubModel,
    Meme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub round: usize,
    pub from: Endpoint,
    pub to: Endpoint,
    pub payload: Payload,
}

/// A peak snapshot: `fingerprint` is the regular model's digest when copied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakEvent {
    pub round: usize,
    pub client: ClientId,
    pub fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct Outcome<T> {
    pub metrics: Vec<RoundMetrics>,
    pub clients: Vec<ClientState<T>>,
    pub transfers: Vec<Transfer>,
    pub peak_events: Vec<PeakEvent>,
    /// Peak fingerprints of every client after each round, round 0 first.
    pub peak_trace: Vec<Vec<u64>>,
    /// Scheduler stamps handed to each round's aggregator, round 1 first.
    pub handoffs: Vec<SchedulerHandoff>,
}

/// Global test set and the pool the clients' data is drawn from.
#[derive(Debug, Clone)]
pub struct ExperimentData<T> {
    pub pool: Dataset<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> ExperimentData<T> {
    /// Build or load the datasets named in the config. The global test set is
    /// always disjoint from the pool.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.dataset;
        let required = |p: &Option<std::path::PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::config(format!("dataset.{key}"), "missing"))
        };
        let (pool, test) = match d.source {
            DataSource::Blobs => {
                let c = d.num_classes.ok_or_else(|| Error::config("dataset.num_classes", "missing"))?;
                let dim = d.dim.ok_or_else(|| Error::config("dataset.dim", "missing"))?;
                let test_seed: u64 = rng::derive(cfg.seed, Stream::TestData, &[]).random();
                let pool = synth_blobs(c, dim, d.train_per_class, d.spread, cfg.seed)?;
                let test = synth_blobs(c, dim, d.test_per_class, d.spread, test_seed)?;
                (pool, Some(test))
            }
            DataSource::Idx => {
                let pool = load_idx(&required(&d.train_images, "train_images")?, &required(&d.train_labels, "train_labels")?)?;
                let test = match (&d.test_images, &d.test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l)?),
                    _ => None,
                };
                (pool, test)
            }
            DataSource::Csv => {
                let pool = load_csv(&required(&d.train_csv, "train_csv")?, d.num_classes)?;
                let test = match &d.test_csv {
                    Some(p) => Some(load_csv(p, Some(pool.num_classes()))?),
                    None => None,
                };
                (pool, test)
            }
        };
        let (pool, test) = match test {
            Some(test) => (pool, test),
            None => holdout(pool, d.test_fraction, cfg.seed)?,
        };
        Self::new(pool, test)
    }

    /// Pair a pool and a test set, widening both to a common class count.
    pub fn new(pool: Dataset<T>, test: Dataset<T>) -> Result<Self> {
        if pool.dim() != test.dim() {
            return Err(Error::shape("test feature dimension", pool.dim(), test.dim()));
        }
        let c = pool.num_classes().max(test.num_classes());
        let widen = |ds: Dataset<T>| -> Result<Dataset<T>> {
            if ds.num_classes() == c {
                Ok(ds)
            } else {
                Dataset::new(ds.features().clone(), ds.labels().to_vec(), c)
            }
        };
        Ok(Self {
            pool: widen(pool)?,
            test: widen(test)?,
        })
    }
}

fn holdout<T: Scalar>(pool: Dataset<T>, fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng::derive(seed, Stream::TestData, &[1]));
    let n_test = ((pool.len() as f64 * fraction).floor() as usize).max(1);
    if n_test >= pool.len() {
        return Err(Error::InvalidArgument("dataset too small to hold out a test set".into()));
    }
    let (test_idx, train_idx) = order.split_at(n_test);
    Ok((pool.subset(train_idx)?, pool.subset(test_idx)?))
}

/// Who takes part in a round.
#[derive(Debug, Clone, PartialEq, Eq)]
struct RoundPlan {
    aggregator: Option<ClientId>,
    senders: Vec<ClientId>,
    pairs: Vec<(ClientId, ClientId)>,
}

impl RoundPlan {
    fn participants(&self) -> Vec<ClientId> {
        let mut ids: Vec<ClientId> = self.senders.clone();
        ids.extend(self.aggregator);
        for &(s, a) in &self.pairs {
            ids.extend([s, a]);
        }
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Run with the configured precision and return the metrics.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    match cfg.precision {
        Precision::F32 => run_experiment::<f32>(cfg).map(|o| o.metrics),
        Precision::F64 => run_experiment::<f64>(cfg).map(|o| o.metrics),
    }
}

pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<Outcome<T>> {
    cfg.validate()?;
    let data = ExperimentData::load(cfg)?;
    run_with_data(cfg, &data)
}

/// The round loop on already prepared data.
pub fn run_with_data<T: Scalar>(cfg: &ExperimentConfig, data: &ExperimentData<T>) -> Result<Outcome<T>> {
    cfg.validate()?;
    Simulation::new(cfg, data)?.run()
}

struct Simulation<'a, T> {
    cfg: &'a ExperimentConfig,
    pool: &'a Dataset<T>,
    test: &'a Dataset<T>,
    topology: Topology,
    clients: Vec<ClientState<T>>,
    /// Per-cluster global models kept by the hub (hub mode only).
    hub: Vec<Model<T>>,
    settings: TrainSettings<T>,
    handoff: SchedulerHandoff,
    prev_aggregator: Option<ClientId>,
    compute: u64,
    outcome: Outcome<T>,
}

impl<'a, T: Scalar> Simulation<'a, T> {
    fn new(cfg: &'a ExperimentConfig, data: &'a ExperimentData<T>) -> Result<Self> {
        let ExperimentData { pool, test } = data;
        let partition = match cfg.dataset.partition {
            PartitionKind::Iid => iid_partition(pool, cfg.num_clients, cfg.seed)?,
            PartitionKind::Dirichlet => dirichlet_partition(pool, cfg.num_clients, cfg.dataset.beta, cfg.seed)?,
        };
        let spec_of = |widths: &[usize]| ModelSpec::new(widths.to_vec(), pool.dim(), pool.num_classes());
        let cluster_specs = cfg
            .models
            .architectures
            .iter()
            .map(|w| spec_of(w))
            .collect::<Result<Vec<_>>>()?;
        let meme_spec = spec_of(cfg.meme_widths())?;

        let mut clients = Vec::with_capacity(cfg.num_clients);
        for (id, split) in partition.clients.into_iter().enumerate() {
            let model = Model::init(&cluster_specs[cfg.cluster_of(id)], cfg.seed)?;
            let mut client = ClientState::new(id, model, split.train, split.val, pool)?;
            if cfg.protocol.name == ProtocolKind::DecFml {
                client.meme = Some(Model::init(&meme_spec, cfg.seed)?);
            }
            clients.push(client);
        }
        let hub = if cfg.topology.aggregator_mode == AggregatorMode::Hub {
            cluster_specs
                .iter()
                .map(|s| Model::init(s, cfg.seed))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let settings = TrainSettings {
            sgd: Sgd {
                lr: T::of(cfg.lr),
                momentum: T::of(cfg.momentum),
                weight_decay: T::of(cfg.weight_decay),
            },
            batch_size: cfg.batch_size,
            temperature: T::of(cfg.temperature),
            supervision: cfg.loss,
        };
        Ok(Self {
            cfg,
            pool,
            test,
            topology: Topology::new(cfg.topology.kind, cfg.num_clients)?,
            clients,
            hub,
            settings,
            handoff: SchedulerHandoff {
                current_round: 1,
                last_period_update_round: 1,
            },
            prev_aggregator: None,
            compute: 0,
            outcome: Outcome {
                metrics: Vec::new(),
                clients: Vec::new(),
                transfers: Vec::new(),
                peak_events: Vec::new(),
                peak_trace: Vec::new(),
                handoffs: Vec::new(),
            },
        })
    }

    fn run(mut self) -> Result<Outcome<T>> {
        let first_alpha = self.schedule()?.alpha();
        let initial = self.evaluate(0, first_alpha, None, 0, 0, false)?;
        self.outcome.metrics.push(initial);
        self.trace_peaks();
        for round in 1..=self.cfg.rounds {
            self.round(round)?;
        }
        self.outcome.clients = self.clients;
        Ok(self.outcome)
    }

    fn schedule(&self) -> Result<AlphaSchedule> {
        Ok(match self.cfg.scheduler.mode {
            ScheduleMode::Cyclic => {
                AlphaSchedule::Cyclic(CycleState::from_handoff(self.cfg.scheduler.cycle_params(), self.handoff)?)
            }
            ScheduleMode::Fixed(a) => AlphaSchedule::Fixed(a),
        })
    }

    fn round(&mut self, t: usize) -> Result<()> {
        let cfg = self.cfg;
        self.outcome.handoffs.push(self.handoff);
        let mut schedule = self.schedule()?;
        let alpha = schedule.alpha();
        let plan = self.plan(t)?;
        let participants = plan.participants();
        let transfers_before = self.outcome.transfers.len();
        let mut work = Work::default();
        let mut distill_skipped = false;

        if cfg.topology.aggregator_mode == AggregatorMode::Hub {
            self.hub_download(t, &participants)?;
        }
        if cfg.protocol.name != ProtocolKind::DecFml {
            work += self.local_phase(t, &participants)?;
        }

        match cfg.protocol.name {
            ProtocolKind::Dfml => {
                let aggregator = plan.aggregator.expect("dfml plans an aggregator");
                let (w, skipped) = self.dfml(t, aggregator, &participants, alpha)?;
                work += w;
                distill_skipped = skipped;
                self.log_star(t, aggregator, &plan.senders, Payload::Model);
                let m = cfg.peak_updates();
                for &id in &participants {
                    let client = &mut self.clients[id];
                    if peak_update(client, alpha, m, &schedule) {
                        self.outcome.peak_events.push(PeakEvent {
                            round: t,
                            client: id,
                            fingerprint: client.regular.fingerprint(),
                        });
                    }
                }
            }
            ProtocolKind::DecFedAvg | ProtocolKind::DecFedProx => {
                self.fedavg(&participants)?;
                match plan.aggregator {
                    Some(a) => self.log_star(t, a, &plan.senders, Payload::Model),
                    None => self.hub_upload(t, &participants)?,
                }
            }
            ProtocolKind::DecHeteroFl | ProtocolKind::DecFedRolex | ProtocolKind::DecFedDropout => {
                let aggregator = plan.aggregator.expect("partial training plans an aggregator");
                self.partial(t, aggregator, &participants)?;
                self.log_star(t, aggregator, &plan.senders, Payload::SubModel);
            }
            ProtocolKind::DefKt => {
                work += self.defkt(t, &plan.pairs)?;
                for &(s, a) in &plan.pairs {
                    self.log(t, Endpoint::Client(s), Endpoint::Client(a), Payload::Model);
                    self.log(t, Endpoint::Client(a), Endpoint::Client(s), Payload::Model);
                }
            }
            ProtocolKind::DecFml => {
                let aggregator = plan.aggregator.expect("dec_fml plans an aggregator");
                work += self.fml(t, &participants)?;
                self.log_star(t, aggregator, &plan.senders, Payload::Meme);
            }
        }

        if cfg.protocol.name != ProtocolKind::Dfml {
            for &id in &participants {
                let client = &mut self.clients[id];
                if client.peak != client.regular {
                    client.peak.clone_from(&client.regular);
                    self.outcome.peak_events.push(PeakEvent {
                        round: t,
                        client: id,
                        fingerprint: client.regular.fingerprint(),
                    });
                }
            }
        }

        let restarted = schedule.advance();
        self.handoff = SchedulerHandoff {
            current_round: t as u64 + 1,
            last_period_update_round: if restarted {
                t as u64 + 1
            } else {
                self.handoff.last_period_update_round
            },
        };
        self.prev_aggregator = plan.aggregator.or(self.prev_aggregator);
        self.compute += work.forward + work.backward;

        if t.is_multiple_of(cfg.eval_every) || t == cfg.rounds {
            let comm = (self.outcome.transfers.len() - transfers_before) as u64;
            let row = self.evaluate(t, alpha, plan.aggregator, participants.len(), comm, distill_skipped)?;
            self.outcome.metrics.push(row);
        }
        self.trace_peaks();
        Ok(())
    }

    fn plan(&self, t: usize) -> Result<RoundPlan> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let t = t as u64;
        if cfg.topology.aggregator_mode == AggregatorMode::Hub {
            let mut r = rng::derive(seed, Stream::Senders, &[t]);
            return Ok(RoundPlan {
                aggregator: None,
                senders: select_clients(cfg.num_clients, cfg.sender_fraction, &mut r)?,
                pairs: Vec::new(),
            });
        }
        if cfg.protocol.name == ProtocolKind::DefKt {
            let mut r = rng::derive(seed, Stream::Pairing, &[t]);
            return Ok(RoundPlan {
                aggregator: None,
                senders: Vec::new(),
                pairs: select_pairs(&self.topology, cfg.sender_fraction, &mut r)?,
            });
        }
        let mut r = rng::derive(seed, Stream::Aggregator, &[t]);
        let aggregator = next_aggregator(&self.topology, self.prev_aggregator, cfg.topology.aggregator_mode, &mut r)?;
        let mut r = rng::derive(seed, Stream::Senders, &[t]);
        let senders = select_senders(&self.topology, aggregator, cfg.sender_fraction, &mut r)?;
        Ok(RoundPlan {
            aggregator: Some(aggregator),
            senders,
            pairs: Vec::new(),
        })
    }

    fn mask(&self, ids: &[ClientId]) -> Vec<bool> {
        let mut mask = vec![false; self.clients.len()];
        for &id in ids {
            mask[id] = true;
        }
        mask
    }

    fn local_phase(&mut self, t: usize, participants: &[ClientId]) -> Result<Work> {
        let cfg = self.cfg;
        let mask = self.mask(participants);
        let prox = cfg.protocol.name == ProtocolKind::DecFedProx;
        let mu = prox.then(|| T::of(cfg.protocol.mu));
        let (pool, settings) = (self.pool, &self.settings);
        let works = self
            .clients
            .par_iter_mut()
            .filter(|c| mask[c.id])
            .map(|client| {
                if prox {
                    client.anchor = Some(client.regular.clone());
                }
                let mut r = rng::derive(cfg.seed, Stream::LocalTrain, &[t as u64, client.id as u64]);
                local_train_client(client, pool, cfg.local_epochs, settings, mu, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(works.into_iter().sum())
    }

    fn dfml(&mut self, t: usize, aggregator: ClientId, participants: &[ClientId], alpha: f64) -> Result<(Work, bool)> {
        let cfg = self.cfg;
        let (gamma, alpha) = cfg.scheduler.component_mode.scales(alpha);
        let mutual = MutualConfig {
            gamma: T::of(gamma),
            alpha: T::of(alpha),
            epochs: cfg.mutual_epochs,
            transfer: cfg.protocol.transfer,
            weighting: cfg.protocol.kl_weighting,
            settings: self.settings,
        };
        let mut models: Vec<Model<T>> = participants.iter().map(|&id| self.clients[id].regular.clone()).collect();
        let pos = participants
            .iter()
            .position(|&id| id == aggregator)
            .expect("aggregator participates");
        let agg = &self.clients[aggregator];
        let mut r = rng::derive(cfg.seed, Stream::Aggregation, &[t as u64]);
        let report = dfml_aggregate(&mut models, pos, self.pool, &agg.train, &agg.beta, &mutual, &mut r)?;
        for (&id, model) in participants.iter().zip(models) {
            self.clients[id].regular = model;
        }
        Ok((report.work, report.distillation_skipped))
    }

    fn sample_weights(&self, participants: &[ClientId]) -> Vec<T> {
        participants
            .iter()
            .map(|&id| T::of(self.clients[id].train.len() as f64))
            .collect()
    }

    fn fedavg(&mut self, participants: &[ClientId]) -> Result<()> {
        let models: Vec<Model<T>> = participants.iter().map(|&id| self.clients[id].regular.clone()).collect();
        let averaged = fedavg_aggregate(&models, &self.sample_weights(participants))?;
        for (&id, model) in participants.iter().zip(averaged) {
            self.clients[id].regular = model;
        }
        Ok(())
    }

    fn partial(&mut self, t: usize, aggregator: ClientId, participants: &[ClientId]) -> Result<()> {
        let scheme = self.cfg.protocol.name.index_scheme().expect("partial-training protocol");
        // the aggregator's model wins ties for the largest architecture
        let global_id = participants
            .iter()
            .copied()
            .max_by_key(|&id| (self.clients[id].regular.param_count(), id == aggregator, std::cmp::Reverse(id)))
            .expect("participants non-empty");
        let global = self.clients[global_id].regular.clone();
        let sets = participants
            .iter()
            .map(|&id| {
                let mut r = rng::derive(self.cfg.seed, Stream::Indices, &[t as u64, id as u64]);
                IndexSets::assign(scheme, self.clients[id].regular.spec(), global.spec(), t - 1, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let models: Vec<Model<T>> = participants.iter().map(|&id| self.clients[id].regular.clone()).collect();
        let (_, refreshed) = pt_aggregate(&global, &models, &sets)?;
        for (&id, model) in participants.iter().zip(refreshed) {
            self.clients[id].regular = model;
        }
        Ok(())
    }

    fn pair_config(&self, epochs: usize) -> MutualConfig<T> {
        let a = self.cfg.protocol.pair_alpha;
        MutualConfig {
            gamma: T::of(1.0 - a),
            alpha: T::of(a),
            epochs,
            transfer: crate::protocols::TransferMode::Mutual,
            weighting: self.cfg.protocol.kl_weighting,
            settings: self.settings,
        }
    }

    fn defkt(&mut self, t: usize, pairs: &[(ClientId, ClientId)]) -> Result<Work> {
        let mutual = self.pair_config(self.cfg.mutual_epochs);
        let (pool, clients, seed) = (self.pool, &self.clients, self.cfg.seed);
        let results = pairs
            .par_iter()
            .map(|&(s, a)| {
                let mut incoming = clients[s].regular.clone();
                let mut local = clients[a].regular.clone();
                let receiver = &clients[a];
                let mut r = rng::derive(seed, Stream::Aggregation, &[t as u64, a as u64]);
                let report = defkt_exchange(&mut incoming, &mut local, pool, &receiver.train, &receiver.beta, &mutual, &mut r)?;
                Ok((incoming, local, report.work))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut work = Work::default();
        for (&(s, a), (incoming, local, w)) in pairs.iter().zip(results) {
            self.clients[s].regular = incoming;
            self.clients[a].regular = local;
            work += w;
        }
        Ok(work)
    }

    fn fml(&mut self, t: usize, participants: &[ClientId]) -> Result<Work> {
        let mutual = self.pair_config(self.cfg.local_epochs);
        let mask = self.mask(participants);
        let (pool, seed) = (self.pool, self.cfg.seed);
        let works = self
            .clients
            .par_iter_mut()
            .filter(|c| mask[c.id])
            .map(|client| {
                let ClientState {
                    id,
                    regular,
                    meme,
                    train,
                    beta,
                    ..
                } = client;
                let meme = meme.as_mut().ok_or(Error::Empty("meme model"))?;
                let mut r = rng::derive(seed, Stream::LocalTrain, &[t as u64, *id as u64]);
                fml_local_mutual(regular, meme, pool, train, beta, &mutual, &mut r).map(|rep| rep.work)
            })
            .collect::<Result<Vec<_>>>()?;

        let memes = participants
            .iter()
            .map(|&id| self.clients[id].meme.clone().ok_or(Error::Empty("meme model")))
            .collect::<Result<Vec<_>>>()?;
        let averaged = fedavg_aggregate(&memes, &self.sample_weights(participants))?;
        for (&id, meme) in participants.iter().zip(averaged) {
            self.clients[id].meme = Some(meme);
        }
        Ok(works.into_iter().sum())
    }

    fn hub_download(&mut self, t: usize, participants: &[ClientId]) -> Result<()> {
        for &id in participants {
            let cluster = self.cfg.cluster_of(id);
            self.clients[id].regular.copy_params_from(&self.hub[cluster])?;
            self.log(t, Endpoint::Hub, Endpoint::Client(id), Payload::Model);
        }
        Ok(())
    }

    /// Store the averaged cluster models at the hub and refresh every
    /// client's view of its cluster's global model.
    fn hub_upload(&mut self, t: usize, participants: &[ClientId]) -> Result<()> {
        for &id in participants {
            let cluster = self.cfg.cluster_of(id);
            self.hub[cluster].copy_params_from(&self.clients[id].regular)?;
            self.log(t, Endpoint::Client(id), Endpoint::Hub, Payload::Model);
        }
        for id in 0..self.clients.len() {
            let cluster = self.cfg.cluster_of(id);
            self.clients[id].regular.copy_params_from(&self.hub[cluster])?;
        }
        Ok(())
    }

    fn log(&mut self, round: usize, from: Endpoint, to: Endpoint, payload: Payload) {
        self.outcome.transfers.push(Transfer {
            round,
            from,
            to,
            payload,
        });
    }

    /// Senders to aggregator and back.
    fn log_star(&mut self, t: usize, aggregator: ClientId, senders: &[ClientId], payload: Payload) {
        for &s in senders {
            self.log(t, Endpoint::Client(s), Endpoint::Client(aggregator), payload);
        }
        for &s in senders {
            self.log(t, Endpoint::Client(aggregator), Endpoint::Client(s), payload);
        }
    }

    fn trace_peaks(&mut self) {
        let trace = self.clients.iter().map(|c| c.peak.fingerprint()).collect();
        self.outcome.peak_trace.push(trace);
    }

    fn evaluate(
        &self,
        round: usize,
        alpha: f64,
        aggregator: Option<ClientId>,
        participants: usize,
        comm_cost: u64,
        distill_skipped: bool,
    ) -> Result<RoundMetrics> {
        let (pool, test) = (self.pool, self.test);
        let dfml = self.cfg.protocol.name == ProtocolKind::Dfml;
        let per_client = self
            .clients
            .par_iter()
            .map(|c| {
                let regular = eval_global(&c.regular, test)?;
                let peak = if dfml { eval_global(&c.peak, test)? } else { regular };
                let local = if c.val.is_empty() {
                    None
                } else {
                    Some(accuracy(&c.regular, pool, Some(&c.val))?)
                };
                let meme = c.meme.as_ref().map(|m| eval_global(m, test)).transpose()?;
                Ok((regular, peak, local, meme))
            })
            .collect::<Result<Vec<_>>>()?;

        let regular_acc: Vec<f64> = per_client.iter().map(|p| p.0).collect();
        let peak_acc: Vec<f64> = per_client.iter().map(|p| p.1).collect();
        let clusters = self.cfg.models.architectures.len();
        let cluster_mean = |acc: &[f64], k: usize| {
            mean(
                acc.iter()
                    .enumerate()
                    .filter(|&(id, _)| self.cfg.cluster_of(id) == k)
                    .map(|(_, &a)| a),
            )
        };
        let memes: Vec<f64> = per_client.iter().filter_map(|p| p.3).collect();
        Ok(RoundMetrics {
            round,
            alpha,
            aggregator,
            participants,
            comm_cost,
            comm_total: self.outcome.transfers.len() as u64,
            compute_cost: self.compute,
            distill_skipped,
            regular_mean: mean(regular_acc.iter().copied()),
            peak_mean: mean(peak_acc.iter().copied()),
            local_mean: mean(per_client.iter().filter_map(|p| p.2)),
            cluster_regular: (0..clusters).map(|k| cluster_mean(&regular_acc, k)).collect(),
            cluster_peak: (0..clusters).map(|k| cluster_mean(&peak_acc, k)).collect(),
            meme_mean: (!memes.is_empty()).then(|| mean(memes)),
            regular_acc,
            peak_acc,
        })
    }
}
