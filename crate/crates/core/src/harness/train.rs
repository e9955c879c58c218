use std::fmt::Write as _;

use rayon::prelude::*;

use super::dataset::Dataset;
use super::derive_seed;
use crate::error::{Error, Result};
use crate::keyperm::gen_permutation;
use crate::vit::{
    argmax, forward, loss_and_grads, sgd_step, softmax_cross_entropy, Real, SgdConfig, SgdState,
    ViTConfig, ViTParams,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Drives the per-epoch batch order.
    pub seed: u64,
}

impl Default for TrainOptions {
    /// Batch 32, lr 0.001, momentum 0.9, weight decay 0.0005, 15 epochs.
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc";

pub fn records_to_csv(records: &[TrainRecord]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
        )
        .unwrap();
    }
    out
}

/// Mean cross-entropy and argmax accuracy over the whole dataset.
pub fn evaluate<T: Real>(
    params: &ViTParams<T>,
    data: &Dataset,
    cfg: &ViTConfig,
) -> Result<(f64, f64)> {
    let per_item: Vec<(f64, bool)> = data
        .items
        .par_iter()
        .map(|(x, y)| {
            if *y >= cfg.classes {
                return Err(Error::Label {
                    label: *y,
                    classes: cfg.classes,
                });
            }
            let logits = forward(x, params, cfg)?;
            let (_, loss) = softmax_cross_entropy(&logits, *y);
            Ok((loss.to_f64().unwrap_or(f64::NAN), argmax(&logits) == *y))
        })
        .collect::<Result<_>>()?;
    let n = per_item.len() as f64;
    let loss = per_item.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = per_item.iter().filter(|(_, c)| *c).count() as f64 / n;
    Ok((loss, acc))
}

/// Mini-batch SGD. Each epoch visits the training set in an order drawn from
/// `(opts.seed, epoch)`, so two runs with the same seed see identical
/// batches. Train loss/accuracy are running averages over the epoch.
pub fn train<T: Real>(
    params: &mut ViTParams<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &ViTConfig,
    opts: &TrainOptions,
) -> Result<Vec<TrainRecord>> {
    if train_set.is_empty() {
        return Err(Error::InvalidSize("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidSize("batch size must be positive".into()));
    }
    let mut state = SgdState::<T>::new();
    let mut records = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let order = gen_permutation(derive_seed(opts.seed, epoch as u64), train_set.len())?;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, idx) in order.map().chunks(opts.batch_size).enumerate() {
            let batch: Vec<_> = idx
                .iter()
                .map(|&i| (&train_set.items[i].0, train_set.items[i].1))
                .collect();
            let out = match loss_and_grads(&batch, params, cfg) {
                Err(Error::NonFiniteLoss | Error::Numeric { .. }) => {
                    return Err(Error::Diverged { epoch, batch: b })
                }
                other => other?,
            };
            let loss = out.loss.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            loss_sum += loss * idx.len() as f64;
            correct += out.correct;
            sgd_step(params, &out.grads, &opts.sgd, &mut state);
        }
        let n = train_set.len() as f64;
        let (test_loss, test_acc) = evaluate(params, test_set, cfg)?;
        records.push(TrainRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_loss,
            test_acc,
        });
    }
    Ok(records)
}
