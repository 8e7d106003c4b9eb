//! Experiment configuration with documented defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{KlWeighting, Supervision};
use crate::nn::ModelSpec;
use crate::protocols::{IndexScheme, TransferMode};
use crate::schedule::{ComponentMode, CycleParams, CycleShape, Growth, ScheduleMode};
use crate::topology::{sender_count, AggregatorMode, TopologyKind};

/// Keys that have no default.
pub const REQUIRED_KEYS: [&str; 6] = [
    "num_clients",
    "rounds",
    "lr",
    "protocol.name",
    "dataset.source",
    "models.architectures",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub num_clients: usize,
    pub rounds: usize,
    #[serde(default = "defaults::sender_fraction")]
    pub sender_fraction: f64,
    #[serde(default = "defaults::one")]
    pub local_epochs: usize,
    /// Mutual-learning epochs at the aggregator (K).
    #[serde(default = "defaults::mutual_epochs")]
    pub mutual_epochs: usize,
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub loss: Supervision,
    /// Evaluate every this many rounds; the last round is always evaluated.
    #[serde(default = "defaults::one")]
    pub eval_every: usize,
    #[serde(default)]
    pub precision: Precision,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub topology: TopologyConfig,
    pub dataset: DatasetConfig,
    pub models: ModelsConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolKind {
    #[serde(rename = "dfml")]
    Dfml,
    #[serde(rename = "dec_fedavg")]
    DecFedAvg,
    #[serde(rename = "dec_fedprox")]
    DecFedProx,
    #[serde(rename = "dec_heterofl")]
    DecHeteroFl,
    #[serde(rename = "dec_fedrolex")]
    DecFedRolex,
    #[serde(rename = "dec_feddropout")]
    DecFedDropout,
    #[serde(rename = "def_kt")]
    DefKt,
    #[serde(rename = "dec_fml")]
    DecFml,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 8] = [
        ProtocolKind::Dfml,
        ProtocolKind::DecFedAvg,
        ProtocolKind::DecFedProx,
        ProtocolKind::DecHeteroFl,
        ProtocolKind::DecFedRolex,
        ProtocolKind::DecFedDropout,
        ProtocolKind::DefKt,
        ProtocolKind::DecFml,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Dfml => "dfml",
            ProtocolKind::DecFedAvg => "dec_fedavg",
            ProtocolKind::DecFedProx => "dec_fedprox",
            ProtocolKind::DecHeteroFl => "dec_heterofl",
            ProtocolKind::DecFedRolex => "dec_fedrolex",
            ProtocolKind::DecFedDropout => "dec_feddropout",
            ProtocolKind::DefKt => "def_kt",
            ProtocolKind::DecFml => "dec_fml",
        }
    }

    pub fn index_scheme(self) -> Option<IndexScheme> {
        match self {
            ProtocolKind::DecHeteroFl => Some(IndexScheme::HeteroFl),
            ProtocolKind::DecFedRolex => Some(IndexScheme::FedRolex),
            ProtocolKind::DecFedDropout => Some(IndexScheme::Dropout),
            _ => None,
        }
    }

    /// Protocols whose aggregation is parameter averaging.
    pub fn is_averaging(self) -> bool {
        matches!(self, ProtocolKind::DecFedAvg | ProtocolKind::DecFedProx) || self.index_scheme().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub name: ProtocolKind,
    /// Proximal strength for `dec_fedprox`.
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    /// Fixed distillation weight of the two-model exchanges in `def_kt` and `dec_fml`.
    #[serde(default = "defaults::half")]
    pub pair_alpha: f64,
    #[serde(default)]
    pub transfer: TransferMode,
    #[serde(default)]
    pub kl_weighting: KlWeighting,
    /// Hidden widths of the shared meme model (`dec_fml`); defaults to the
    /// first architecture.
    #[serde(default)]
    pub meme_widths: Option<Vec<usize>>,
    /// Peak updates per cycle; defaults to 1, or `round(N / |S|)` when the
    /// sender fraction is below one half.
    #[serde(default)]
    pub peak_updates: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default = "defaults::schedule_mode")]
    pub mode: ScheduleMode,
    #[serde(default)]
    pub alpha_min: f64,
    #[serde(default = "defaults::alpha_max")]
    pub alpha_max: f64,
    #[serde(default = "defaults::initial_period")]
    pub initial_period: usize,
    #[serde(default)]
    pub period_growth: Growth,
    #[serde(default)]
    pub cycle_shape: CycleShape,
    #[serde(default)]
    pub component_mode: ComponentMode,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Cyclic,
            alpha_min: 0.0,
            alpha_max: defaults::alpha_max(),
            initial_period: defaults::initial_period(),
            period_growth: Growth::default(),
            cycle_shape: CycleShape::default(),
            component_mode: ComponentMode::default(),
        }
    }
}

impl SchedulerConfig {
    pub fn cycle_params(&self) -> CycleParams {
        CycleParams {
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
            initial_len: self.initial_period,
            growth: self.period_growth,
            shape: self.cycle_shape,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(default)]
    pub kind: TopologyKind,
    #[serde(default)]
    pub aggregator_mode: AggregatorMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian blobs on a lattice of class means.
    Blobs,
    Idx,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    #[default]
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(default)]
    pub partition: PartitionKind,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    /// Blob classes; for CSV, overrides the class count inferred from labels.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "defaults::train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "defaults::spread")]
    pub spread: f64,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub train_csv: Option<PathBuf>,
    #[serde(default)]
    pub test_csv: Option<PathBuf>,
    /// Share of the pool held out as the global test set when no test file is given.
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    /// Hidden widths per architecture cluster, assigned round-robin over clients.
    pub architectures: Vec<Vec<usize>>,
}

mod defaults {
    use crate::schedule::ScheduleMode;

    pub fn one() -> usize {
        1
    }
    pub fn sender_fraction() -> f64 {
        0.5
    }
    pub fn mutual_epochs() -> usize {
        10
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn temperature() -> f64 {
        1.0
    }
    pub fn mu() -> f64 {
        0.01
    }
    pub fn half() -> f64 {
        0.5
    }
    pub fn schedule_mode() -> ScheduleMode {
        ScheduleMode::Cyclic
    }
    pub fn alpha_max() -> f64 {
        1.0
    }
    pub fn initial_period() -> usize {
        10
    }
    pub fn beta() -> f64 {
        0.1
    }
    pub fn train_per_class() -> usize {
        200
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn spread() -> f64 {
        0.5
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
}

impl ExperimentConfig {
    /// Architecture of client `n` (round-robin over clusters).
    pub fn cluster_of(&self, client: usize) -> usize {
        client % self.models.architectures.len()
    }

    pub fn peak_updates(&self) -> usize {
        self.protocol.peak_updates.unwrap_or_else(|| {
            if self.sender_fraction < 0.5 {
                let s = sender_count(self.sender_fraction, self.num_clients);
                ((self.num_clients as f64 / s as f64).round() as usize).max(1)
            } else {
                1
            }
        })
    }

    pub fn meme_widths(&self) -> &[usize] {
        self.protocol
            .meme_widths
            .as_deref()
            .unwrap_or(&self.models.architectures[0])
    }

    /// Check every value that the types alone cannot, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.num_clients < 2 {
            return fail("num_clients", format!("need at least 2 clients, got {}", self.num_clients));
        }
        if self.rounds == 0 {
            return fail("rounds", "must be >= 1".into());
        }
        if !(self.sender_fraction > 0.0 && self.sender_fraction <= 1.0) {
            return fail("sender_fraction", format!("{} outside (0, 1]", self.sender_fraction));
        }
        for (key, v) in [("local_epochs", self.local_epochs), ("mutual_epochs", self.mutual_epochs)] {
            if v == 0 {
                return fail(key, "must be >= 1".into());
            }
        }
        for (key, v) in [("batch_size", self.batch_size), ("eval_every", self.eval_every)] {
            if v == 0 {
                return fail(key, "must be >= 1".into());
            }
        }
        for (key, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("protocol.mu", self.protocol.mu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(key, format!("{v} must be finite and >= 0"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.protocol.pair_alpha) {
            return fail("protocol.pair_alpha", "must lie in [0, 1]".into());
        }
        if self.protocol.peak_updates == Some(0) {
            return fail("protocol.peak_updates", "must be >= 1".into());
        }
        self.scheduler
            .cycle_params()
            .validate()
            .map_err(|e| Error::config("scheduler", e.to_string()))?;
        self.validate_topology()?;
        self.validate_dataset()?;
        self.validate_models()
    }

    fn validate_topology(&self) -> Result<()> {
        let key = "topology";
        match self.topology.kind {
            TopologyKind::Bridged if self.num_clients < 4 => {
                return Err(Error::config("topology.kind", "bridged layout needs >= 4 clients"));
            }
            _ => {}
        }
        match self.topology.aggregator_mode {
            AggregatorMode::Fixed(id) if id >= self.num_clients => Err(Error::config(
                format!("{key}.aggregator_mode"),
                format!("client {id} does not exist"),
            )),
            AggregatorMode::Hub
                if !matches!(self.protocol.name, ProtocolKind::DecFedAvg | ProtocolKind::DecFedProx) =>
            {
                Err(Error::config(
                    format!("{key}.aggregator_mode"),
                    format!("hub mode only supports dec_fedavg and dec_fedprox, not {}", self.protocol.name.name()),
                ))
            }
            AggregatorMode::Hub if self.topology.kind != TopologyKind::Mesh => Err(Error::config(
                format!("{key}.aggregator_mode"),
                "hub mode requires the mesh topology",
            )),
            _ => Ok(()),
        }
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        if d.partition == PartitionKind::Dirichlet && !(d.beta > 0.0 && d.beta.is_finite()) {
            return Err(Error::config("dataset.beta", "must be positive"));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::config("dataset.test_fraction", "must lie in (0, 1)"));
        }
        let need = |present: bool, key: &str| {
            if present {
                Ok(())
            } else {
                Err(Error::config(format!("dataset.{key}"), format!("required for source {:?}", d.source)))
            }
        };
        match d.source {
            DataSource::Blobs => {
                need(d.num_classes.is_some(), "num_classes")?;
                need(d.dim.is_some(), "dim")?;
                if d.train_per_class == 0 || d.test_per_class == 0 {
                    return Err(Error::config("dataset.train_per_class", "per-class counts must be >= 1"));
                }
                if !(d.spread >= 0.0 && d.spread.is_finite()) {
                    return Err(Error::config("dataset.spread", "must be finite and >= 0"));
                }
            }
            DataSource::Idx => {
                need(d.train_images.is_some(), "train_images")?;
                need(d.train_labels.is_some(), "train_labels")?;
                if d.test_images.is_some() != d.test_labels.is_some() {
                    return Err(Error::config("dataset.test_images", "test images and labels go together"));
                }
            }
            DataSource::Csv => need(d.train_csv.is_some(), "train_csv")?,
        }
        Ok(())
    }

    fn validate_models(&self) -> Result<()> {
        let archs = &self.models.architectures;
        if archs.is_empty() {
            return Err(Error::config("models.architectures", "need at least one architecture"));
        }
        if archs.len() > self.num_clients {
            return Err(Error::config(
                "models.architectures",
                format!("{} architectures for {} clients leaves clusters empty", archs.len(), self.num_clients),
            ));
        }
        for (i, widths) in archs.iter().enumerate() {
            ModelSpec::new(widths.clone(), 1, 1)
                .map_err(|e| Error::config(format!("models.architectures[{i}]"), e.to_string()))?;
        }
        if let Some(widths) = &self.protocol.meme_widths {
            ModelSpec::new(widths.clone(), 1, 1).map_err(|e| Error::config("protocol.meme_widths", e.to_string()))?;
        }
        let kind = self.protocol.name;
        if kind == ProtocolKind::DefKt && archs.iter().any(|a| a != &archs[0]) {
            return Err(Error::config(
                "models.architectures",
                "def_kt only supports homogeneous architectures",
            ));
        }
        if kind.index_scheme().is_some() {
            let dummy = |w: &Vec<usize>| ModelSpec::new(w.clone(), 1, 1).expect("validated above");
            let largest = archs
                .iter()
                .max_by_key(|w| dummy(w).param_count())
                .expect("non-empty");
            for (i, widths) in archs.iter().enumerate() {
                crate::protocols::model_rate(&dummy(widths), &dummy(largest)).map_err(|_| {
                    Error::config(
                        format!("models.architectures[{i}]"),
                        format!("{widths:?} is not a width-scaled version of {largest:?}"),
                    )
                })?;
            }
        }
        Ok(())
    }
}
