//! Experiment orchestration: synthetic datasets, the toy detector,
//! alternating adversarial training, evaluation and file formats.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod evaluate;
pub mod fixture;
pub mod gradsuite;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use dataset::{Dataset, Record};
pub use detector::{PhysiqueNet, ToyDetector};
pub use evaluate::{evaluate, evaluate_records, oracle_sets, write_reports};
pub use train::{train, EpochLog, Model, StepLosses, TrainOutcome};
