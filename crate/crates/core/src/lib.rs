//! Frequency security assessment: grid model, time-domain oracle, aggregated
//! frequency-response knowledge, physics constraints, a small autodiff
//! engine, the dual-channel fusion model and its training pipelines.

pub mod grid;
pub mod asfr;
pub mod constraints;
pub mod sim;
pub mod nn;
pub mod dataset;
pub mod model;
pub mod train;
pub mod eval;
pub mod experiment;
pub mod assess;
