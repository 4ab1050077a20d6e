//! Long-tailed synthetic interaction logs with planted user groups.
//!
//! Each user belongs to one group. A group prefers its own block of items
//! (Zipf-ranked inside the block) plus a shared share of the whole catalog.
//! Per-user click counts follow a truncated Zipf law, some clicks are noise
//! (uniform over the catalog), some repeat an earlier click, and every click
//! comes with impressions that were not clicked. Clicks arrive in short visits.

use std::collections::HashSet;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_interactions_csv, write_item_meta, Feedback, Interaction, ItemMeta};
use crate::error::{invalid, io_err, HimError, Result};
use crate::reorg::DAY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    /// Planted group count.
    pub groups: usize,
    /// Exponent of the per-user click-count law.
    pub zipf_exponent: f64,
    pub max_positives: usize,
    /// Exponent of item popularity inside a group block.
    pub item_exponent: f64,
    /// Probability mass a group spreads uniformly over the whole catalog.
    pub shared_mass: f64,
    /// Probability that a click ignores the group and is uniform over the catalog.
    pub noise: f64,
    /// Probability that a click repeats one of the user's earlier clicks.
    pub repeat: f64,
    /// Unclicked impressions generated per click.
    pub impressions_per_click: usize,
    /// Share of impressions drawn from the user's group distribution (the rest is uniform).
    pub targeted_impressions: f64,
    /// Categories per group block; each is a contiguous slice of the block.
    pub categories_per_group: usize,
    /// Probability that a non-noise click stays inside the user's current category.
    pub focus: f64,
    /// Mean days between switches of a user's current category.
    pub interest_period_days: f64,
    pub brands: usize,
    pub shops: usize,
    /// Mean clicks per visit. Clicks of one visit fall within `visit_hours` of each other.
    pub visit_clicks: f64,
    pub visit_hours: u64,
    /// Visits are spread over this many days before the end of the log.
    pub horizon_days: u64,
    /// End of the log, seconds since the epoch.
    pub end_time: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 5_000,
            items: 1_000,
            groups: 5,
            zipf_exponent: 1.1,
            max_positives: 30,
            item_exponent: 1.0,
            shared_mass: 0.1,
            noise: 0.1,
            repeat: 0.2,
            impressions_per_click: 2,
            targeted_impressions: 0.0,
            categories_per_group: 4,
            focus: 0.7,
            interest_period_days: 180.0,
            brands: 20,
            shops: 50,
            visit_clicks: 3.0,
            visit_hours: 2,
            horizon_days: 730,
            end_time: 1_700_000_000,
            seed: 0,
        }
    }
}

/// Generated log, item side information and planted groups (by user index).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub interactions: Vec<Interaction>,
    pub items: Vec<ItemMeta>,
    pub user_groups: Vec<usize>,
}

pub fn user_id(u: usize) -> String {
    format!("u{u}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i}")
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `P(k) ∝ k^-s` for `k = 1..=max`.
pub fn truncated_zipf(exponent: f64, max: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=max).map(|k| (k as f64).powf(-exponent)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| HimError::Format(e.to_string()))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    /// Block offsets per category and the within-block popularity rank of every offset.
    /// Ranks interleave across categories so each holds a similar share of the mass.
    fn block_layout(&self) -> (Vec<std::ops::Range<usize>>, Vec<usize>) {
        let block = self.items / self.groups;
        let c = self.categories_per_group;
        let len = block / c;
        let ranges: Vec<std::ops::Range<usize>> = (0..c)
            .map(|k| k * len..if k + 1 == c { block } else { (k + 1) * len })
            .collect();
        let mut rank = vec![0; block];
        let mut next = 0;
        for i in 0..block.div_ceil(c.max(1)) {
            for r in &ranges {
                if r.start + i < r.end {
                    rank[r.start + i] = next;
                    next += 1;
                }
            }
        }
        (ranges, rank)
    }

    /// Item distribution preferred by each group.
    pub fn group_distributions(&self) -> Vec<Vec<f64>> {
        let block = self.items / self.groups;
        let weights = truncated_zipf(self.item_exponent, block);
        let (_, rank) = self.block_layout();
        let uniform = self.shared_mass / self.items as f64;
        (0..self.groups)
            .map(|g| {
                let mut p = vec![uniform; self.items];
                for (o, &r) in rank.iter().enumerate() {
                    p[g * block + o] += (1.0 - self.shared_mass) * weights[r];
                }
                p
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.groups == 0 || self.max_positives == 0 {
            return Err(invalid(
                "synth spec",
                "users, groups and max_positives must be positive",
            ));
        }
        if self.items < self.groups * 2 {
            return Err(invalid("synth spec", "need at least two items per group"));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("repeat", self.repeat),
            ("shared_mass", self.shared_mass),
            ("targeted_impressions", self.targeted_impressions),
            ("focus", self.focus),
        ] {
            if !(0.0..1.0).contains(&v)
                && !(matches!(name, "targeted_impressions" | "focus") && v == 1.0)
            {
                return Err(invalid("synth spec", format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.zipf_exponent > 0.0 && self.item_exponent >= 0.0) {
            return Err(invalid("synth spec", "exponents must be positive"));
        }
        if !(self.visit_clicks >= 1.0)
            || self.visit_hours == 0
            || self.visit_hours * 3_600 >= self.horizon_days * DAY
        {
            return Err(invalid(
                "synth spec",
                "visit_clicks must be at least 1 and visits must fit in the horizon",
            ));
        }
        if !(self.interest_period_days > 0.0) {
            return Err(invalid(
                "synth spec",
                "interest_period_days must be positive",
            ));
        }
        if self.categories_per_group == 0
            || self.items / self.groups < self.categories_per_group
            || self.brands == 0
            || self.shops == 0
            || self.horizon_days == 0
        {
            return Err(invalid("synth spec", "categories (at most one per block item), brands, shops and horizon must be positive"));
        }
        if self.end_time < self.horizon_days * DAY {
            return Err(invalid("synth spec", "end_time precedes the horizon"));
        }
        let dists = self.group_distributions();
        for a in 0..dists.len() {
            for b in a + 1..dists.len() {
                let tv = total_variation(&dists[a], &dists[b]);
                if tv <= 0.2 {
                    return Err(invalid(
                        "synth spec",
                        format!("groups {a} and {b} differ by TV {tv:.3}"),
                    ));
                }
            }
        }
        let catalog_room = self.items - self.max_positives.min(self.items);
        if self.impressions_per_click > 0 && catalog_room == 0 {
            return Err(invalid("synth spec", "catalog too small for impressions"));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthData> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let count_dist =
            WeightedIndex::new(truncated_zipf(self.zipf_exponent, self.max_positives)).unwrap();
        let block = self.items / self.groups;
        let (ranges, rank) = self.block_layout();
        let item_weights = truncated_zipf(self.item_exponent, block);
        let group_dists: Vec<WeightedIndex<f64>> = self
            .group_distributions()
            .into_iter()
            .map(|p| WeightedIndex::new(p).unwrap())
            .collect();
        // Offsets within a block, drawn by popularity inside one category.
        let category_dists: Vec<WeightedIndex<f64>> = ranges
            .iter()
            .map(|r| WeightedIndex::new(r.clone().map(|o| item_weights[rank[o]])).unwrap())
            .collect();
        let horizon = self.horizon_days * DAY;
        let start = self.end_time - horizon;
        let period = self.interest_period_days * DAY as f64;

        let mut interactions = Vec::new();
        let mut user_groups = Vec::with_capacity(self.users);
        for u in 0..self.users {
            let g = rng.gen_range(0..self.groups);
            user_groups.push(g);
            let clicks = count_dist.sample(&mut rng) + 1;
            let mut times: Vec<u64> = Vec::with_capacity(clicks);
            let visit_len = self.visit_hours * 3_600;
            while times.len() < clicks {
                let mut size = 1;
                while rng.gen::<f64>() >= 1.0 / self.visit_clicks {
                    size += 1;
                }
                let begin = start + rng.gen_range(0..horizon - visit_len);
                for _ in 0..size.min(clicks - times.len()) {
                    times.push(begin + rng.gen_range(0..visit_len));
                }
            }
            times.sort_unstable();
            let mut category = rng.gen_range(0..ranges.len());
            let mut next_switch = start as f64 + exponential(&mut rng, period);
            let mut clicked: Vec<usize> = Vec::with_capacity(clicks);
            for &t in &times {
                while next_switch <= t as f64 {
                    category = rng.gen_range(0..ranges.len());
                    next_switch += exponential(&mut rng, period);
                }
                let item = if !clicked.is_empty() && rng.gen::<f64>() < self.repeat {
                    *clicked.choose(&mut rng).unwrap()
                } else if rng.gen::<f64>() < self.noise {
                    rng.gen_range(0..self.items)
                } else if rng.gen::<f64>() < self.focus {
                    g * block + ranges[category].start + category_dists[category].sample(&mut rng)
                } else {
                    group_dists[g].sample(&mut rng)
                };
                clicked.push(item);
                interactions.push(Interaction {
                    user_id: user_id(u),
                    item_id: item_id(item),
                    timestamp: t,
                    feedback: Feedback::Positive,
                    rating: None,
                });
            }
            let clicked_set: HashSet<usize> = clicked.iter().copied().collect();
            for &t in &times {
                for _ in 0..self.impressions_per_click {
                    let item = loop {
                        let cand = if rng.gen::<f64>() < self.targeted_impressions {
                            group_dists[g].sample(&mut rng)
                        } else {
                            rng.gen_range(0..self.items)
                        };
                        if !clicked_set.contains(&cand) {
                            break cand;
                        }
                    };
                    // Shown on the same page as the click.
                    interactions.push(Interaction {
                        user_id: user_id(u),
                        item_id: item_id(item),
                        timestamp: t,
                        feedback: Feedback::Negative,
                        rating: None,
                    });
                }
            }
        }
        interactions.sort_by(|a, b| {
            (a.timestamp, &a.user_id, &a.item_id, a.feedback).cmp(&(
                b.timestamp,
                &b.user_id,
                &b.item_id,
                b.feedback,
            ))
        });

        let items = (0..self.items)
            .map(|i| {
                let g = (i / block).min(self.groups - 1);
                let o = (i - g * block).min(block - 1);
                let c = g * ranges.len() + ranges.iter().position(|r| r.contains(&o)).unwrap_or(0);
                let price = (2f64).powf(rng.gen_range(0.0..10.0));
                ItemMeta {
                    item_id: item_id(i),
                    category: format!("c{c}"),
                    brand: format!("b{}", rng.gen_range(0..self.brands)),
                    shop: format!("s{}", rng.gen_range(0..self.shops)),
                    price: format!("{price:.2}"),
                }
            })
            .collect();
        Ok(SynthData {
            interactions,
            items,
            user_groups,
        })
    }
}

fn exponential<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    -mean * (1.0 - rng.gen::<f64>()).ln()
}

impl SynthData {
    /// Writes `interactions.csv`, `items.csv` and `groups.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_interactions_csv(&dir.join("interactions.csv"), &self.interactions)?;
        write_item_meta(&dir.join("items.csv"), &self.items)?;
        let path = dir.join("groups.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["user_id", "group_id"])?;
        for (u, g) in self.user_groups.iter().enumerate() {
            w.write_record([user_id(u), g.to_string()])?;
        }
        w.flush().map_err(io_err(&path))?;
        Ok(())
    }
}

/// Reads a `user_id,group_id` file.
pub fn load_groups(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let (user, group): (String, usize) = row?;
        out.push((user, group));
    }
    Ok(out)
}
