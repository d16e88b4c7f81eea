//! Federated training of fairness-constrained classifiers with local
//! differential privacy.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix it to `f64`, with `*32` variants for `f32`.

pub mod config;
pub mod data;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod fairness;
pub mod fed;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = matrix::Matrix<f64>;
pub type Dataset = data::Dataset<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type Gradient = model::Gradient<f64>;
pub type GroupStats = fairness::GroupStats<f64>;
pub type LagrangeMultipliers = trainer::LagrangeMultipliers<f64>;
pub type ClientSplit = fed::ClientSplit<f64>;
pub type RunResult = fed::RunResult<f64>;

pub type Matrix32 = matrix::Matrix<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type Gradient32 = model::Gradient<f32>;
pub type GroupStats32 = fairness::GroupStats<f32>;
pub type LagrangeMultipliers32 = trainer::LagrangeMultipliers<f32>;
pub type ClientSplit32 = fed::ClientSplit<f32>;
pub type RunResult32 = fed::RunResult<f32>;
