//! Recurrent video object-centric learning at desk scale.
//!
//! The pipeline mirrors the aggregation-transition recurrence of video OCL:
//! an encoder maps frames to feature grids, a slot-attention aggregator
//! refines per-frame queries into slots, a transitioner predicts the next
//! frame's query (optionally conditioned on the next frame's features and
//! relative time embeddings), and a spatial-broadcast mixture decoder
//! reconstructs the feature grid from slots. Training minimizes the MSE
//! between reconstructions and stop-gradient feature targets over a clip.
//!
//! Everything is CPU-only, f64, and deterministic given a seed: the same
//! config and seed reproduce checkpoints and metric logs bit for bit.

pub mod analysis;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod tape;
pub mod tensorspec;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
