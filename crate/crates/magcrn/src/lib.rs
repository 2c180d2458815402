//! MAGCRN: multi-step forecasting for station networks.
//!
//! Predicts per-station NO2 concentration over an hourly horizon by
//! conditioning past observations on past covariates (traffic, calendar) and
//! on future covariates (weather, calendar), encoding both conditioned
//! signals with graph-recurrent cells over a learned station graph, and
//! fusing the two embeddings with a mixing coefficient before projecting to
//! the horizon.
//!
//! The crate is organized as:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff
//! - [`nn`]: the forecasting model (conditioning, graph-recurrent cells, fusion)
//! - [`data`]: CSV ingestion, calendar covariates, splits, normalization, windowing
//! - [`train`]: MAE loss, Adam, cosine-annealing schedule, early stopping, checkpoints
//! - [`metrics`]: MAE / RMSE / MRE and the multi-horizon evaluation protocol
//! - [`synth`]: synthetic station-network generator with planted dependencies
//! - [`cli`]: run configuration and the command implementations

pub mod cli;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
