//! Synthetic data, the training loop and the scenario runner.

mod dataset;
mod experiment;
mod train;

pub use dataset::{
    decrypt_dataset, encrypt_dataset, gen_synthetic_dataset, Dataset, Split, SyntheticParams,
    SyntheticTask,
};
pub use experiment::{
    prepare_scenario, pretrain_source, run_experiment, run_scenario, target_task, ExperimentConfig,
    Scenario, ScenarioRun,
};
pub use train::{evaluate, records_to_csv, train, TrainOptions, TrainRecord, CSV_HEADER};

use crate::keyperm::KeyedRngState;

/// Derives an independent sub-seed for a `(seed, tag)` pair.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let (a, _) = KeyedRngState::new(seed).next();
    KeyedRngState::new(a ^ tag).next().0
}
