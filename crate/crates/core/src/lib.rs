//! Critic-free policy optimization on a toy autoregressive task.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the scalar to `f64`, which is what
//! the command-line runner uses.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod advantage;
pub mod config;
pub mod env;
pub mod error;
pub mod filters;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod surrogate;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PolicyParamsF64 = policy::PolicyParams<f64>;
pub type RolloutBatchF64 = rollout::RolloutBatch<f64>;
pub type ResponseF64 = rollout::Response<f64>;
pub type AdvantageTensorF64 = advantage::AdvantageTensor<f64>;
pub type LossConfigF64 = surrogate::LossConfig<f64>;
pub type TrainerF64 = trainer::Trainer<f64>;
