//! Experiment runner: single runs, scenario grids and paired comparisons.

pub mod batch;
pub mod compare;
pub mod error;
pub mod run;
pub mod scenario;

pub use error::{CliError, Result};
