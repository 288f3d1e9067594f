//! Desk-scale lab for copyright-protected retrieval-augmented diffusion
//! sampling over analytic Gaussian-mixture score oracles.

pub mod audit;
pub mod cpr;
pub mod dist;
pub mod error;
pub mod num;
pub mod retrieval;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod stats;

pub use error::{Error, Result};
pub use num::Real;

pub type NoiseSchedule64 = schedule::NoiseSchedule<f64>;
pub type GaussianMixture64 = dist::GaussianMixture<f64>;
pub type ScoreOracle64 = dist::ScoreOracle<f64>;
