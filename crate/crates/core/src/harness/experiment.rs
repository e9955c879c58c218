//! The three fine-tuning scenarios.
//!
//! A source model is first pretrained on plain images of an upstream task
//! (same motif bank, different class assignments). It is then fine-tuned on
//! the target task in one of three ways:
//!
//! * `plain`: source model, plain images;
//! * `proposed`: adapted source model, images encrypted with the same keys
//!   for both training and testing;
//! * `without_da`: unadapted source model, encrypted images.

use std::fmt;
use std::str::FromStr;

use super::dataset::{encrypt_dataset, Dataset, Split, SyntheticParams, SyntheticTask};
use super::derive_seed;
use super::train::{train, TrainOptions, TrainRecord};
use crate::adapt::adapt_params;
use crate::blockcodec::EncryptionKeys;
use crate::error::{Error, Result};
use crate::vit::{init_params, SgdConfig, ViTConfig, ViTParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    Plain,
    Proposed,
    WithoutDa,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Plain => "plain",
            Scenario::Proposed => "proposed",
            Scenario::WithoutDa => "without_da",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Scenario::Plain),
            "proposed" => Ok(Scenario::Proposed),
            "without_da" => Ok(Scenario::WithoutDa),
            _ => Err(Error::Config(format!("unknown scenario {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ViTConfig,
    pub data: SyntheticParams,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pretrain_per_class: usize,
    pub pretrain: TrainOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::default(),
            data: SyntheticParams::default(),
            train_per_class: 32,
            test_per_class: 16,
            pretrain_per_class: 64,
            pretrain: TrainOptions {
                epochs: 20,
                batch_size: 32,
                sgd: SgdConfig {
                    lr: 0.005,
                    ..SgdConfig::default()
                },
                seed: 0,
            },
        }
    }
}

/// Plain target-task splits for a given experiment seed.
pub fn target_task(exp: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let task = SyntheticTask::new(
        derive_seed(seed, 2),
        exp.model.classes,
        &exp.model,
        exp.data,
    )?;
    Ok((
        task.sample(derive_seed(seed, 20), exp.train_per_class, Split::Train)?,
        task.sample(derive_seed(seed, 21), exp.test_per_class, Split::Test)?,
    ))
}

/// Pretrains a fresh model on the plain upstream task.
pub fn pretrain_source(exp: &ExperimentConfig, seed: u64) -> Result<ScenarioRun> {
    let cfg = &exp.model;
    let task = SyntheticTask::new(derive_seed(seed, 1), cfg.classes, cfg, exp.data)?;
    let train_set = task.sample(derive_seed(seed, 10), exp.pretrain_per_class, Split::Train)?;
    let test_set = task.sample(derive_seed(seed, 11), exp.test_per_class, Split::Test)?;
    let mut params = init_params(cfg, derive_seed(seed, 3))?;
    let opts = TrainOptions {
        seed: derive_seed(seed, 4),
        ..exp.pretrain
    };
    let records = train(&mut params, &train_set, &test_set, cfg, &opts)?;
    Ok(ScenarioRun { params, records })
}

/// The source model with its classifier zeroed, ready for a new task.
pub fn with_fresh_head(source: &ViTParams<f32>) -> ViTParams<f32> {
    let mut p = source.clone();
    p.head.data.fill(0.0);
    p.head_bias.fill(0.0);
    p
}

/// Model and data a scenario starts from.
pub fn prepare_scenario(
    scenario: Scenario,
    source: &ViTParams<f32>,
    keys: &EncryptionKeys,
    cfg: &ViTConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(ViTParams<f32>, Dataset, Dataset)> {
    match scenario {
        Scenario::Plain => Ok((source.clone(), train_set.clone(), test_set.clone())),
        Scenario::Proposed => Ok((
            adapt_params(source, keys, cfg)?,
            encrypt_dataset(train_set, keys)?,
            encrypt_dataset(test_set, keys)?,
        )),
        Scenario::WithoutDa => {
            if keys.block_size != cfg.patch_size {
                return Err(Error::Config(format!(
                    "block size {} does not match patch size {}",
                    keys.block_size, cfg.patch_size
                )));
            }
            Ok((
                source.clone(),
                encrypt_dataset(train_set, keys)?,
                encrypt_dataset(test_set, keys)?,
            ))
        }
    }
}

/// Result of one scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub params: ViTParams<f32>,
    pub records: Vec<TrainRecord>,
}

/// Fine-tunes an already pretrained source model under `scenario`.
pub fn run_scenario(
    scenario: Scenario,
    source: &ViTParams<f32>,
    keys: &EncryptionKeys,
    exp: &ExperimentConfig,
    opts: &TrainOptions,
) -> Result<ScenarioRun> {
    let cfg = &exp.model;
    let (train_set, test_set) = target_task(exp, opts.seed)?;
    let source = with_fresh_head(source);
    let (mut params, train_set, test_set) =
        prepare_scenario(scenario, &source, keys, cfg, &train_set, &test_set)?;
    let records = train(&mut params, &train_set, &test_set, cfg, opts)?;
    Ok(ScenarioRun { params, records })
}

/// Pretrain, then fine-tune under `scenario`. Everything is a function of
/// `(scenario, keys, exp, opts)`.
pub fn run_experiment(
    scenario: Scenario,
    keys: &EncryptionKeys,
    exp: &ExperimentConfig,
    opts: &TrainOptions,
) -> Result<ScenarioRun> {
    let source = pretrain_source(exp, opts.seed)?;
    run_scenario(scenario, &source.params, keys, exp, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::records_to_csv;

    fn small_exp() -> ExperimentConfig {
        ExperimentConfig {
            model: ViTConfig {
                image_h: 8,
                image_w: 8,
                channels: 3,
                patch_size: 4,
                embed_dim: 16,
                heads: 2,
                layers: 1,
                mlp_dim: 32,
                classes: 4,
            },
            train_per_class: 4,
            test_per_class: 2,
            pretrain_per_class: 4,
            pretrain: TrainOptions {
                epochs: 1,
                batch_size: 8,
                ..TrainOptions::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn scenario_names() {
        for s in [Scenario::Plain, Scenario::Proposed, Scenario::WithoutDa] {
            assert_eq!(s.to_string().parse::<Scenario>().unwrap(), s);
        }
        assert!("bogus".parse::<Scenario>().is_err());
    }

    #[test]
    fn identity_keys_make_proposed_equal_plain() {
        let exp = small_exp();
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 8,
            seed: 5,
            ..TrainOptions::default()
        };
        let keys = EncryptionKeys::identity(4);
        let plain = run_experiment(Scenario::Plain, &keys, &exp, &opts).unwrap();
        let proposed = run_experiment(Scenario::Proposed, &keys, &exp, &opts).unwrap();
        assert_eq!(
            records_to_csv(&plain.records),
            records_to_csv(&proposed.records)
        );
        assert_eq!(plain.params, proposed.params);
    }

    #[test]
    fn mismatched_block_size_is_rejected() {
        let exp = small_exp();
        let source = init_params(&exp.model, 0).unwrap();
        let keys = EncryptionKeys::new(1, 2, 2);
        for s in [Scenario::Proposed, Scenario::WithoutDa] {
            assert!(run_scenario(s, &source, &keys, &exp, &TrainOptions::default()).is_err());
        }
    }
}
