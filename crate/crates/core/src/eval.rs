//! Metrics and user segmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Area under the ROC curve: the probability that a random positive outscores
/// a random negative, ties counting one half.
///
/// Computed from sorted ranks in exact integer arithmetic, so it is
/// bit-identical to the all-pairs count `(wins + ties / 2) / (P * N)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid("auc", "scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("auc", "NaN score"));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(invalid(
            "auc",
            "needs at least one positive and one negative",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U statistic.
    let mut u2: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        u2 += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(u2 as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UserSegment {
    Tailed,
    Body,
    Head,
}

impl UserSegment {
    pub const ALL: [UserSegment; 3] = [UserSegment::Tailed, UserSegment::Body, UserSegment::Head];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            UserSegment::Tailed => "tailed",
            UserSegment::Body => "body",
            UserSegment::Head => "head",
        }
    }
}

impl fmt::Display for UserSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Thresholds on positive-history length: below `tailed_below` is tailed,
/// above `head_above` is head, anything between is body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmenter {
    pub tailed_below: usize,
    pub head_above: usize,
}

impl Default for Segmenter {
    fn default() -> Self {
        Self {
            tailed_below: 3,
            head_above: 5,
        }
    }
}

impl Segmenter {
    pub fn segment(&self, positives: usize) -> UserSegment {
        if positives < self.tailed_below {
            UserSegment::Tailed
        } else if positives > self.head_above {
            UserSegment::Head
        } else {
            UserSegment::Body
        }
    }

    /// Segment per user from their positive counts.
    pub fn segment_users(&self, positive_counts: &[usize]) -> Vec<UserSegment> {
        positive_counts.iter().map(|&c| self.segment(c)).collect()
    }
}

/// Upper bounds of the positive-history length buckets used as a context feature.
const LENGTH_EDGES: [usize; 6] = [0, 1, 2, 5, 10, 20];
pub const LENGTH_BUCKETS: usize = LENGTH_EDGES.len() + 1;

/// Buckets 0, 1, 2, 3-5, 6-10, 11-20, 21+.
pub fn length_bucket(len: usize) -> usize {
    LENGTH_EDGES.partition_point(|&e| e < len)
}

/// Fraction of users whose predicted group maps to their true group under the
/// best one-to-one relabeling of predicted groups.
pub fn group_recovery_score(
    predicted: &BTreeMap<usize, usize>,
    truth: &BTreeMap<usize, usize>,
) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.keys().ne(truth.keys()) {
        return Err(invalid(
            "group recovery",
            "predicted and true user sets differ",
        ));
    }
    if truth.is_empty() {
        return Err(invalid("group recovery", "no users"));
    }
    let pred_ids: Vec<usize> = predicted
        .values()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let true_ids: Vec<usize> = truth
        .values()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let size = pred_ids.len().max(true_ids.len());
    let mut counts = vec![vec![0i64; size]; size];
    for (user, p) in predicted {
        let r = pred_ids.binary_search(p).unwrap();
        let c = true_ids.binary_search(&truth[user]).unwrap();
        counts[r][c] += 1;
    }
    let weights =
        Matrix::from_rows(counts).map_err(|e| invalid("group recovery", e.to_string()))?;
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / truth.len() as f64)
}
