//! Mini-batch training with Adam, gradient clipping, validation AUC per epoch
//! and early stopping.

use him_autograd::{AdamConfig, AutogradError, ParamStore, Scalar, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::HimConfig;
use crate::data::{Dataset, DatasetSplit, LabeledSample};
use crate::error::{HimError, Result};
use crate::eval::auc;
use crate::model::{Batch, HimModel, ModelSpec, TableSizes};
use crate::ubc::draw_negative_users;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over batches of the full objective.
    pub train_loss: f64,
    pub train_cross_entropy: f64,
    /// Mean group loss over batches (0 when not computed).
    pub train_group_loss: f64,
    pub validation_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    /// Parameters from the epoch with the best validation AUC (the last epoch without validation).
    pub model: HimModel<S>,
    pub trace: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Seed of the stream that draws group-loss negatives for one batch.
/// Kept apart from the shuffling stream so switching the group loss on or off
/// leaves the batch order untouched.
fn negative_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [epoch as u64, batch as u64] {
        x = (x ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    x
}

/// Splits `n` shuffled positions into batches of `size`; a tail shorter than
/// `min` joins the previous batch.
pub fn batch_ranges(n: usize, size: usize, min: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < min) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().end = tail.end;
    }
    out
}

fn non_finite(e: HimError, epoch: usize, batch: usize) -> HimError {
    match e {
        HimError::Autograd(AutogradError::NonFinite { .. }) => {
            HimError::NonFiniteLoss { epoch, batch }
        }
        other => other,
    }
}

/// AUC of `scores` against the labels of `samples`, or `None` when they hold a single class.
pub fn auc_of(scores: &[f64], samples: &[LabeledSample]) -> Result<Option<f64>> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    if !labels.contains(&0) || !labels.contains(&1) {
        return Ok(None);
    }
    auc(scores, &labels).map(Some)
}

/// AUC of `model` on `samples`, or `None` when they hold a single class.
pub fn evaluate_auc<S: Scalar>(
    model: &HimModel<S>,
    data: &Dataset,
    samples: &[LabeledSample],
    chunk: usize,
) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    auc_of(&model.predict(data, samples, chunk)?, samples)
}

/// Trains a fresh model initialized from `config.seed`.
pub fn train<S: Scalar>(
    config: &HimConfig,
    data: &Dataset,
    split: &DatasetSplit,
) -> Result<TrainOutcome<S>> {
    let spec = ModelSpec::new(config, TableSizes::of(data), data.has_real_negatives)?;
    let model = HimModel::new(spec, config.seed)?;
    train_model(config, model, data, split)
}

/// Trains `model` in place of its current parameters.
pub fn train_model<S: Scalar>(
    config: &HimConfig,
    mut model: HimModel<S>,
    data: &Dataset,
    split: &DatasetSplit,
) -> Result<TrainOutcome<S>> {
    if split.train.is_empty() {
        return Err(crate::error::invalid("training", "empty training split"));
    }
    let adam = AdamConfig::with_lr(config.lr);
    let clip = S::lit(config.clip_norm);
    let group = model.spec.uses_group_loss();
    let p = model.spec.negative_users;
    // Same batch boundaries whether or not the group loss runs.
    let min_batch = p + 1;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore<S>)> = None;
    let mut since_best = 0usize;
    let mut samples = Vec::with_capacity(config.batch_size * 2);

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let ranges = batch_ranges(order.len(), config.batch_size, min_batch);
        if ranges.iter().any(|r| r.len() < min_batch) {
            return Err(crate::error::invalid(
                "training",
                format!(
                    "{} training samples cannot fill a batch for {p} negative users",
                    order.len()
                ),
            ));
        }
        let (mut loss_sum, mut ce_sum, mut lg_sum) = (0.0, 0.0, 0.0);
        for (b, range) in ranges.iter().enumerate() {
            samples.clear();
            samples.extend(order[range.clone()].iter().map(|&i| split.train[i]));
            let batch = Batch::build(&model.spec, data, &samples)?;
            let negatives = if group {
                let mut rng = ChaCha8Rng::seed_from_u64(negative_seed(config.seed, epoch, b));
                Some(draw_negative_users(
                    &mut rng,
                    batch.size,
                    model.spec.ubp.t,
                    p,
                )?)
            } else {
                None
            };
            let mut tape = Tape::new();
            let f = model
                .forward(&mut tape, &batch, negatives.as_deref())
                .map_err(|e| non_finite(e, epoch, b))?;
            let loss = tape.scalar(f.loss).to_f64_lossy();
            if !loss.is_finite() {
                return Err(HimError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss;
            ce_sum += tape.scalar(f.cross_entropy).to_f64_lossy();
            lg_sum += f.group_loss.map_or(0.0, |v| tape.scalar(v).to_f64_lossy());
            tape.backward(f.loss)?;
            model.store.accumulate(&tape)?;
            model.store.clip_grad_norm(clip);
            model.store.adam_step(&adam)?;
        }
        let n = ranges.len() as f64;
        let validation_auc = evaluate_auc(&model, data, &split.validation, config.eval_batch_size)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_cross_entropy: ce_sum / n,
            train_group_loss: lg_sum / n,
            validation_auc,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} ce {:.5} lg {:.5} val auc {}",
            stats.train_loss,
            stats.train_cross_entropy,
            stats.train_group_loss,
            validation_auc.map_or("n/a".to_string(), |a| format!("{a:.5}"))
        );
        trace.push(stats);
        let Some(score) = validation_auc else {
            continue;
        };
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => trace.len().saturating_sub(1),
    };
    Ok(TrainOutcome {
        model,
        trace,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_tail_joins_previous_batch() {
        assert_eq!(batch_ranges(10, 4, 3), vec![0..4, 4..10]);
        assert_eq!(batch_ranges(11, 4, 3), vec![0..4, 4..8, 8..11]);
        assert_eq!(batch_ranges(2, 4, 3), vec![0..2]);
    }

    #[test]
    fn negative_streams_differ_by_batch() {
        assert_ne!(negative_seed(1, 0, 0), negative_seed(1, 0, 1));
        assert_ne!(negative_seed(1, 0, 1), negative_seed(1, 1, 0));
        assert_eq!(negative_seed(5, 2, 3), negative_seed(5, 2, 3));
    }
}
