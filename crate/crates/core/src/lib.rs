//! Traffic speed forecasting from connected-vehicle trajectories with a
//! macro-micro cross-attention transformer and a Student-t output head.
//!
//! The pipeline runs bottom up:
//!
//! * [`ingest`] parses and cleans raw points and maps them onto segments,
//! * [`features`] aggregates them into per-segment 5-minute frames and windows,
//! * [`model`] holds the network,
//! * [`objective`] has the loss, point metrics and interval diagnostics,
//! * [`training`] runs Adam with early stopping,
//! * [`synth`] generates corridors with congestion waves for experiments.

pub mod dataset;
mod error;
pub mod features;
pub mod grid;
pub mod ingest;
pub mod model;
pub mod objective;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use numcore;
