//! Core library for a photonic sampling feature-extraction pipeline:
//! Gaussian-state simulation, exact threshold-detector sampling, a coherent
//! classical baseline, image data loading, feature encoding into detector
//! click statistics, linear readout layers, and evaluation harnesses.

pub mod data;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod readout;
pub mod sampler;

pub use error::{Error, Result};
