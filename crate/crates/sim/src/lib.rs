//! Experiment runner for [`gfpl_core`]: TOML configuration, IDX loading,
//! run directories with metrics CSV, JSON run records and checkpoints, and
//! parameter sweeps.

pub mod config;
pub mod error;
pub mod io;
pub mod runner;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{Result, SimError};
pub use runner::{run_experiment, Experiment, PoolExecutor, RunOutput};
pub use sweep::{sweep, SweepOutput, SweepRow};
