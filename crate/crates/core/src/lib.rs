//! Intent-driven sampling and dual inverse-propensity debiasing for CTR
//! models, with a synthetic world that knows the true user intents.

pub mod checkpoint;
pub mod config;
pub mod ctr;
pub mod dataset;
pub mod debias;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod uiem;
pub mod world;

pub use error::{Error, Result};
