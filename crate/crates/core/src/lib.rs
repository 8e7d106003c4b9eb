//! Serverless federated mutual learning among clients with heterogeneous
//! MLP architectures, together with decentralized averaging, partial-training
//! and knowledge-transfer baselines.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix the precision used by the simulator.

pub mod data;
pub mod engine;
pub mod error;
pub mod io;
pub mod losses;
pub mod nn;
pub mod protocols;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod topology;

pub use error::{Error, IdxError, Result};
pub use scalar::Scalar;

/// Double-precision model, the simulator default.
pub type Model = nn::Model<f64>;
pub type Model32 = nn::Model<f32>;
pub type Dataset = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Gradients = nn::Gradients<f64>;
pub type LabelProportions = losses::LabelProportions<f64>;
