//! Reference scorers: item popularity and a logistic regression over
//! user, item and category ids.

use him_autograd::{AdamConfig, ParamId, ParamStore, Scalar, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::HimConfig;
use crate::data::{Dataset, DatasetSplit, LabeledSample};
use crate::error::{invalid, Result};
use crate::model::cross_entropy;
use crate::train::{auc_of, batch_ranges, EpochStats};

/// Scores items by their positive count in the training split, divided by the
/// largest count. Items never clicked in training score 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Popularity {
    scores: Vec<f64>,
}

impl Popularity {
    pub fn fit(items: usize, train: &[LabeledSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(invalid("popularity", "empty training split"));
        }
        let mut counts = vec![0u64; items];
        for s in train.iter().filter(|s| s.label == 1) {
            counts[s.item] += 1;
        }
        let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        Ok(Self {
            scores: counts.into_iter().map(|c| c as f64 / max).collect(),
        })
    }

    pub fn score(&self, item: usize) -> f64 {
        self.scores.get(item).copied().unwrap_or(0.0)
    }

    pub fn predict(&self, samples: &[LabeledSample]) -> Vec<f64> {
        samples.iter().map(|s| self.score(s.item)).collect()
    }
}

/// `sigmoid(b + w_user + w_item + w_category)` with zero initialization.
#[derive(Debug, Clone)]
pub struct LogisticRegression<S> {
    pub store: ParamStore<S>,
    bias: ParamId,
    user: ParamId,
    item: ParamId,
    category: ParamId,
}

impl<S: Scalar> LogisticRegression<S> {
    pub fn new(users: usize, items: usize, categories: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let bias = store.insert_zeros("lr.bias", vec![1, 1])?;
        let user = store.insert_zeros("lr.user", vec![users.max(1), 1])?;
        let item = store.insert_zeros("lr.item", vec![items.max(1), 1])?;
        let category = store.insert_zeros("lr.category", vec![categories.max(1), 1])?;
        Ok(Self {
            store,
            bias,
            user,
            item,
            category,
        })
    }

    pub fn for_dataset(data: &Dataset) -> Result<Self> {
        Self::new(data.users.size(), data.items.size(), data.categories.size())
    }

    /// `B x 2` probabilities `[1 - p, p]`.
    pub fn forward_with(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        data: &Dataset,
        samples: &[LabeledSample],
    ) -> Result<Var> {
        let b = samples.len();
        let bias = tape.param(store, self.bias);
        let mut z = tape.gather(bias, &vec![0; b])?;
        let users: Vec<usize> = samples.iter().map(|s| s.user).collect();
        let items: Vec<usize> = samples.iter().map(|s| s.item).collect();
        let cats: Vec<usize> = samples
            .iter()
            .map(|s| data.item_meta.get(s.item).map_or(0, |m| m[0]))
            .collect();
        for (table, idx) in [
            (self.user, users),
            (self.item, items),
            (self.category, cats),
        ] {
            let t = tape.param(store, table);
            let w = tape.gather(t, &idx)?;
            z = tape.add(z, w)?;
        }
        let zero = tape.zeros(vec![b, 1])?;
        let logits = tape.hconcat(&[zero, z])?;
        Ok(tape.softmax_rows(logits)?)
    }

    pub fn loss_with(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        data: &Dataset,
        samples: &[LabeledSample],
    ) -> Result<Var> {
        let probs = self.forward_with(store, tape, data, samples)?;
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        cross_entropy(tape, probs, &labels)
    }

    pub fn predict(
        &self,
        data: &Dataset,
        samples: &[LabeledSample],
        chunk: usize,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let probs = self.forward_with(&self.store, &mut tape, data, part)?;
            out.extend(tape.data(probs).chunks(2).map(|r| r[1].to_f64_lossy()));
        }
        Ok(out)
    }

    /// One Adam step on `samples`; returns the batch loss.
    pub fn step(
        &mut self,
        data: &Dataset,
        samples: &[LabeledSample],
        adam: &AdamConfig,
        clip: f64,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_with(&self.store, &mut tape, data, samples)?;
        let value = tape.scalar(loss).to_f64_lossy();
        tape.backward(loss)?;
        self.store.accumulate(&tape)?;
        self.store.clip_grad_norm(S::lit(clip));
        self.store.adam_step(adam)?;
        Ok(value)
    }
}

/// Trains the regression with the model's batch size, learning rate, epochs,
/// patience and seed; keeps the weights with the best validation AUC.
pub fn train_lr<S: Scalar>(
    config: &HimConfig,
    data: &Dataset,
    split: &DatasetSplit,
) -> Result<(LogisticRegression<S>, Vec<EpochStats>)> {
    if split.train.is_empty() {
        return Err(invalid("training", "empty training split"));
    }
    let mut model = LogisticRegression::for_dataset(data)?;
    let adam = AdamConfig::with_lr(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut trace = Vec::new();
    let mut best: Option<(f64, ParamStore<S>)> = None;
    let mut since_best = 0;
    let mut batch = Vec::with_capacity(config.batch_size * 2);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let ranges = batch_ranges(order.len(), config.batch_size, 1);
        let mut total = 0.0;
        for r in &ranges {
            batch.clear();
            batch.extend(order[r.clone()].iter().map(|&i| split.train[i]));
            total += model.step(data, &batch, &adam, config.clip_norm)?;
        }
        let validation_auc = auc_of(
            &model.predict(data, &split.validation, config.eval_batch_size)?,
            &split.validation,
        )?;
        let mean = total / ranges.len() as f64;
        trace.push(EpochStats {
            epoch,
            train_loss: mean,
            train_cross_entropy: mean,
            train_group_loss: 0.0,
            validation_auc,
        });
        let Some(score) = validation_auc else {
            continue;
        };
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(user: usize, item: usize, label: u8) -> LabeledSample {
        LabeledSample {
            user,
            item,
            timestamp: 0,
            label,
        }
    }

    #[test]
    fn popularity_is_monotone_in_count() {
        let mut train: Vec<LabeledSample> = (0..10).map(|u| s(u, 1, 1)).collect();
        train.extend((0..2).map(|u| s(u, 2, 1)));
        train.push(s(0, 3, 0));
        let p = Popularity::fit(5, &train).unwrap();
        assert_eq!(p.score(1), 1.0);
        assert!(p.score(1) > p.score(2));
        assert_eq!(p.score(3), 0.0);
        assert_eq!(p.score(4), 0.0);
        assert_eq!(p.score(99), 0.0);
        assert!(Popularity::fit(5, &[]).is_err());
    }
}
