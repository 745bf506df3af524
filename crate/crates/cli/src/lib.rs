//! Experiment runner: config-driven sweeps, verification suites, diversity
//! profiles and convergence tables on top of `vitstem`.

pub mod config;
pub mod convergence;
pub mod profile;
pub mod svg;
pub mod sweep;
pub mod verify;

pub use config::{parse_config, parse_config_str, ExperimentConfig, RunSpec};
pub use sweep::{run_sweep, SweepOutcome, SweepRow, SweepTable};
