//! Importance-aware submodel extraction for federated learning across
//! clients of different capacity.
//!
//! A client of capacity `gamma` trains the Top-K magnitude submodel of the
//! global model. Gradients flow through a straight-through estimator of the
//! magnitude mask, so parameters are pushed across the threshold by their
//! own importance rather than by a fixed structure. Baselines with static,
//! rolling and greedily pruned submodels share the same round loop.

pub mod baselines;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod report;
pub mod seed;
pub mod server;

pub use config::{ExperimentConfig, Method};
pub use error::{Error, Result};
pub use exec::Schedule;
pub use experiment::{Experiment, RunOutput};
pub use masking::{CapacityProfile, Granularity, Mask, MaskScope, Threshold};
pub use params::{LayerLayout, ParamVector};
