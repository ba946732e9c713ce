#![allow(dead_code)]

use hypopose::harness::config::ExperimentConfig;
use hypopose::harness::{dataset, Dataset};

/// Defaults shrunk for quick runs: small detector, one short stage.
pub fn quick_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.detector.hidden = 32;
    cfg.mask.physique_hidden = 32;
    cfg.optimizer.stage1_epochs = 1;
    cfg.optimizer.stage2_epochs = 0;
    cfg.eval.val_samples = 8;
    cfg
}

pub fn small_dataset(cfg: &ExperimentConfig, n: usize, seed: u64) -> Dataset {
    dataset::generate(&cfg.data, n, seed).expect("dataset generation")
}
