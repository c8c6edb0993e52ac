//! Cadence-aware set encoding (CASE) for next-basket repurchase recommendation.
//!
//! The library is organized as a pipeline:
//!
//! * [`ingest`] parses transaction CSVs into per-user basket histories,
//! * [`signal`] turns histories into binary calendar-day signals and scoring examples,
//! * [`autodiff`] is a reverse-mode tape with exactly the operators the model needs,
//! * [`model`] builds the CASE forward pass (multi-scale cadence CNN + induced
//!   set attention) on that tape,
//! * [`train`] runs minibatch Adam with per-epoch validation and checkpointing,
//! * [`metrics`] / [`baselines`] evaluate rankers under leave-one-out protocol,
//! * [`synth`] generates a planted-cadence corpus with a known oracle,
//! * [`config`] / [`checkpoint`] handle run configuration and model serialization.
//!
//! Numeric code is generic over [`scalar::Scalar`] so the same model runs in
//! `f32` (training default) or `f64` (gradient checking).

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod signal;
pub mod synth;
pub mod train;

pub use error::{CaseError, Result};

/// Training/default precision.
pub type DefaultFloat = f32;
/// Precision used by gradient checks.
pub type CheckFloat = f64;

/// Tensor in the default (training) precision.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Tensor in the gradient-check precision.
pub type Tensor64 = autodiff::Tensor<f64>;
/// Tape in the default (training) precision.
pub type Tape32 = autodiff::Tape<f32>;
/// Tape in the gradient-check precision.
pub type Tape64 = autodiff::Tape<f64>;
/// Model parameters in the default (training) precision.
pub type CaseParams32 = model::CaseParams<f32>;
/// Model parameters in the gradient-check precision.
pub type CaseParams64 = model::CaseParams<f64>;
