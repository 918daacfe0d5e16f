//! Training-free flow-path samplers for diffusion models.
//!
//! A diffusion score is reparameterized into a flow-matching velocity field
//! (see [`transform`]), integrated either with plain Euler steps or with an
//! adaptive exponential multistep rule that splits the velocity into a linear
//! drift and a slowly varying residual (see [`sampler`]). Everything is
//! exercised against closed-form Gaussian-mixture targets ([`target`]) so the
//! scores, velocities and posterior means are exact.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! `*F64` aliases below are what the benchmark harness uses.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod linalg;
pub mod metrics;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod target;
pub mod transform;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use metrics::{EnergyReference, MetricReport, SlicedW2Reference};
pub use sampler::{AdaptiveConfig, CoefficientMode, SamplerId, SamplerRun, TimeGrid, ORACLE_END_TIME};
pub use schedule::{Inversion, MarginalCoeffs, NoiseSchedule, ScheduleKind, TimeMap};
pub use target::{AnalyticVelocity, Perturbation, TargetDistribution, TargetKind, TargetScore};
pub use transform::{
    to_flow_velocity, Counted, FlowVelocity, FrozenRule, Provenance, ScoreOracle, VelocityField,
};

pub type NoiseScheduleF64 = NoiseSchedule<f64>;
pub type NoiseScheduleF32 = NoiseSchedule<f32>;
pub type TimeMapF64 = TimeMap<f64>;
pub type TimeMapF32 = TimeMap<f32>;
pub type TargetF64 = TargetDistribution<f64>;
pub type TargetF32 = TargetDistribution<f32>;
pub type TimeGridF64 = TimeGrid<f64>;
pub type SamplerRunF64 = SamplerRun<f64>;
pub type AdaptiveConfigF64 = AdaptiveConfig<f64>;
pub type SamplesF64 = ndarray::Array2<f64>;
