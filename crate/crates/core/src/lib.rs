//! Synthetic time series with long-range dependence from neural fractional SDEs.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod fbm;
pub mod generator;
pub mod hurst;
pub mod metrics;
pub mod net;
pub mod path;
pub mod rng;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
pub use path::SamplePath;
