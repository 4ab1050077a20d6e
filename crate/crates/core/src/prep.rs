//! Raw log to indexed dataset and train/validation/test split.

use serde::{Deserialize, Serialize};

use crate::config::HimConfig;
use crate::data::{
    filter_sparse, label_from_ratings, sample_negatives, split_dataset, Dataset, DatasetSplit,
    Interaction, ItemMeta, LabeledSample, LoadedInteractions,
};
use crate::error::{invalid, Result};

/// Counts reported after preparation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub samples: usize,
    pub has_real_negatives: bool,
    pub split_fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub summary: PrepSummary,
}

/// Labels, filters, indexes and splits a loaded log.
///
/// Logs with an explicit feedback column keep their impressions as label-0
/// samples. Rating-only logs are labeled from ratings and, like logs without
/// either column, get `negative_ratio` sampled negatives per positive.
pub fn prepare(
    loaded: LoadedInteractions,
    meta: &[ItemMeta],
    config: &HimConfig,
) -> Result<Prepared> {
    let LoadedInteractions {
        interactions,
        has_feedback,
        has_rating,
        ..
    } = loaded;
    let interactions = if !has_feedback && has_rating {
        label_from_ratings(interactions)?
    } else {
        interactions
    };
    prepare_labeled(interactions, meta, config, has_feedback)
}

pub fn prepare_labeled(
    interactions: Vec<Interaction>,
    meta: &[ItemMeta],
    config: &HimConfig,
    has_real_negatives: bool,
) -> Result<Prepared> {
    let interactions = filter_sparse(
        interactions,
        config.min_user_positives,
        config.min_item_users,
    );
    if interactions.is_empty() {
        return Err(invalid("prep", "no interactions survive filtering"));
    }
    let dataset = Dataset::build(&interactions, meta, has_real_negatives);
    let samples = build_samples(&dataset, config)?;
    let split = split_dataset(&samples, config.split, config.seed)?;
    let summary = PrepSummary {
        users: dataset.num_users() - 1,
        items: dataset.items.size() - 1,
        interactions: interactions.len(),
        samples: samples.len(),
        has_real_negatives,
        split_fingerprint: split.fingerprint(),
    };
    log::info!(
        "prepared {} users, {} items, {} samples (split {:016x})",
        summary.users,
        summary.items,
        summary.samples,
        summary.split_fingerprint
    );
    Ok(Prepared {
        dataset,
        split,
        summary,
    })
}

fn build_samples(data: &Dataset, config: &HimConfig) -> Result<Vec<LabeledSample>> {
    let all = data.interaction_samples();
    if data.has_real_negatives {
        return Ok(all);
    }
    let positives: Vec<LabeledSample> = all.into_iter().filter(|s| s.label == 1).collect();
    let mut samples = positives.clone();
    samples.extend(sample_negatives(
        &positives,
        &data.catalog(),
        config.negative_ratio,
        config.seed,
    )?);
    samples.sort_by_key(|s| (s.user, s.timestamp, s.item, s.label));
    Ok(samples)
}
