//! Operational shell: configuration, optimizer, trainer, checkpoints and
//! reports.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod report;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{Phase, RunConfig};
pub use trainer::{load_splits, run_ablate, synth, Splits, Trainer};
