//! Experiment configuration, file formats and the Monte Carlo driver.

pub mod config;
pub mod io;
pub mod mc;

pub use config::{ExperimentConfig, FunctionalSpec, StartRule};
pub use mc::{mc_run, replication_seed, McReport, McRow, McTable, Replication, TimingRow};
