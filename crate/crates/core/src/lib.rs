//! Frequency-domain adaptive Kalman filtering for acoustic echo cancellation.
//!
//! - [`framing`]: OLA/OLS block engines and the DFT boundary.
//! - [`filters`]: the FDKF recursion, alternative gain laws, oracle
//!   adaptation and the time-domain NLMS baseline.
//! - [`echosim`]: synthetic echo-path and scenario generation.
//! - [`metrics`]: ERLE, misalignment, log-MSE and section aggregates.
//! - [`audio_io`]: WAV, configuration and table I/O.
//! - [`pipeline`]: streams a scenario through a filter and evaluates it.

pub mod audio_io;
pub mod echosim;
pub mod error;
pub mod filters;
pub mod framing;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
