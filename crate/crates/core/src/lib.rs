//! Cross-diffusion forecasting of marked event sequences.
//!
//! A sequence is a list of `(inter-arrival time, event type)` pairs. Given a
//! history, the model samples the next `N` pairs jointly by running two
//! coupled reverse diffusion chains, one over Box-Cox transformed times and
//! one over categorical types.

pub mod cli;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod forecaster;
pub mod hawkes;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod rng;
pub mod schedule;
pub mod sequences;
pub mod trainer;
pub mod transform;

pub use error::{Error, Result};
pub use model::CDiffModel;
