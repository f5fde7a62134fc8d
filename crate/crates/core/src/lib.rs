//! Simulation and analysis core for a wavelength-multiplexed entanglement
//! distribution network driven by a single microring photon-pair source.

pub mod analysis;
pub mod control;
pub mod detection_sim;
pub mod error;
pub mod franson;
pub mod planner;
pub mod qkd;
pub mod rng;
pub mod source_sim;
pub mod spectral_grid;

pub use error::{Error, Result};
