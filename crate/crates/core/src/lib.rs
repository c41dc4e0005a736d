//! OTDR trace simulation, denoising and fault diagnosis.

pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod dcae;
pub mod denoiser;
pub mod faultnet;
mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sim;
pub mod train;

pub use error::{CoreError, Result};
