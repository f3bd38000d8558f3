//! Configuration, datasets, run directories and the experiment commands.

pub mod config;
pub mod data;
pub mod presets;
pub mod run;

pub use config::{ArchPreset, ExperimentConfig, SweepAxis};
pub use run::{run, run_fixtures, Command, ExitStatus, ExperimentSpec, RunDir, RunOutcome};
