//! Latent-state filtering with hypernetwork-generated predictors, sequential
//! and static baselines, online training, streaming evaluation and metrics.

pub mod baselines;
pub mod budget;
pub mod checkpoint;
pub mod columnar;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod inference;
pub mod latent;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod training;

pub use error::{LtError, Result};
pub use mixture::{Mixture, MixtureSummary};
