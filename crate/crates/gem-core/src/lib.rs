//! gem: a desk-scale probabilistic forecasting engine on the sphere.
//!
//! The crate couples a stochastic windowed-attention emulator over an
//! equirectangular grid with a proper-scoring training objective (fair
//! CRPS plus a spectral log-power term), a synthetic atmosphere that
//! provides a continuous-time oracle for daily extrema, and a full
//! verification stack: climatological analog ensembles, CRPS/quantile
//! skill, relative economic value, and spherical power spectra.

pub mod attn;
pub mod climatology;
pub mod config;
pub mod decision;
pub mod error;
pub mod gemf;
pub mod grid;
pub mod model;
pub mod rollout;
pub mod scoring;
pub mod sht;
pub mod synth;
pub mod tape;
pub mod train;
pub mod verify;

pub use error::{ErrorClass, GemError, Result};
pub use grid::{area_weighted_mean, latitude_weights, make_grid, Field, GridSpec, WeightField};
pub use model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
pub use rollout::EnsembleForecast;
