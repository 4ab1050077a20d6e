//! Interaction records, vocabularies and the preprocessing steps applied
//! before training: rating labels, sparse filtering, negative sampling and
//! train/validation/test splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, HimError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feedback {
    Positive,
    Negative,
}

impl Feedback {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "pos" | "positive" | "click" | "true" => Some(Self::Positive),
            "0" | "neg" | "negative" | "impression" | "false" => Some(Self::Negative),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Positive => "1",
            Self::Negative => "0",
        }
    }
}

/// One raw (user, item, time, feedback) event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    /// Seconds since the epoch.
    pub timestamp: u64,
    pub feedback: Feedback,
    pub rating: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::Jsonl,
            _ => Self::Csv,
        }
    }
}

/// Result of [`load_interactions`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedInteractions {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
    /// At least one record carried an explicit feedback value (real negatives).
    pub has_feedback: bool,
    /// At least one record carried a rating.
    pub has_rating: bool,
}

#[derive(Debug, Default, Deserialize)]
struct JsonRecord {
    user_id: Option<serde_json::Value>,
    item_id: Option<serde_json::Value>,
    timestamp: Option<serde_json::Value>,
    rating: Option<serde_json::Value>,
    feedback: Option<serde_json::Value>,
}

fn json_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn parse_rating(s: &str) -> Option<u8> {
    let r: f64 = s.trim().parse().ok()?;
    if r.fract() != 0.0 || !(1.0..=5.0).contains(&r) {
        return None;
    }
    Some(r as u8)
}

fn parse_timestamp(s: &str) -> Option<u64> {
    let s = s.trim();
    s.parse::<u64>().ok().or_else(|| {
        s.parse::<f64>()
            .ok()
            .filter(|t| *t >= 0.0 && t.is_finite())
            .map(|t| t as u64)
    })
}

struct Fields<'a> {
    user: Option<&'a str>,
    item: Option<&'a str>,
    timestamp: Option<&'a str>,
    rating: Option<&'a str>,
    feedback: Option<&'a str>,
}

fn build_record(f: Fields<'_>) -> Option<(Interaction, bool, bool)> {
    let user_id = f.user.map(str::trim).filter(|s| !s.is_empty())?.to_string();
    let item_id = f.item.map(str::trim).filter(|s| !s.is_empty())?.to_string();
    let timestamp = parse_timestamp(f.timestamp?)?;
    let rating = match f.rating.map(str::trim).filter(|s| !s.is_empty()) {
        Some(r) => Some(parse_rating(r)?),
        None => None,
    };
    let feedback = match f.feedback.map(str::trim).filter(|s| !s.is_empty()) {
        Some(fb) => Some(Feedback::parse(fb)?),
        None => None,
    };
    let interaction = Interaction {
        user_id,
        item_id,
        timestamp,
        feedback: feedback.unwrap_or(Feedback::Positive),
        rating,
    };
    Some((interaction, feedback.is_some(), rating.is_some()))
}

/// Reads interaction records. Columns/keys: `user_id,item_id,timestamp` plus
/// optional `rating` (1..5) and `feedback` (`1`/`0`, `pos`/`neg`). Records
/// without feedback default to positive. Malformed records are skipped and
/// counted; more than 10% malformed is fatal.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<LoadedInteractions> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut parsed = Vec::new();
    let mut malformed = 0usize;
    match format {
        InputFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(file);
            let headers = reader.headers()?.clone();
            let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
            let (cu, ci, ct) = (col("user_id"), col("item_id"), col("timestamp"));
            let (cr, cf) = (col("rating"), col("feedback"));
            if cu.is_none() || ci.is_none() || ct.is_none() {
                return Err(HimError::Format(format!(
                    "{}: header must contain user_id,item_id,timestamp",
                    path.display()
                )));
            }
            for record in reader.records() {
                let rec = match record {
                    Ok(r) if r.len() == headers.len() => r,
                    _ => {
                        malformed += 1;
                        continue;
                    }
                };
                let get = |c: Option<usize>| c.and_then(|c| rec.get(c));
                match build_record(Fields {
                    user: get(cu),
                    item: get(ci),
                    timestamp: get(ct),
                    rating: get(cr),
                    feedback: get(cf),
                }) {
                    Some(r) => parsed.push(r),
                    None => malformed += 1,
                }
            }
        }
        InputFormat::Jsonl => {
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let Ok(rec) = serde_json::from_str::<JsonRecord>(&line) else {
                    malformed += 1;
                    continue;
                };
                let text = |v: &Option<serde_json::Value>| v.as_ref().and_then(json_text);
                let (u, i, t, r, f) = (
                    text(&rec.user_id),
                    text(&rec.item_id),
                    text(&rec.timestamp),
                    text(&rec.rating),
                    text(&rec.feedback),
                );
                match build_record(Fields {
                    user: u.as_deref(),
                    item: i.as_deref(),
                    timestamp: t.as_deref(),
                    rating: r.as_deref(),
                    feedback: f.as_deref(),
                }) {
                    Some(r) => parsed.push(r),
                    None => malformed += 1,
                }
            }
        }
    }
    let total = parsed.len() + malformed;
    if malformed * 10 > total {
        return Err(HimError::TooManyMalformed {
            path: path.to_path_buf(),
            malformed,
            total,
        });
    }
    if malformed > 0 {
        log::warn!("{}: skipped {malformed} malformed records", path.display());
    }
    let has_feedback = parsed.iter().any(|(_, f, _)| *f);
    let has_rating = parsed.iter().any(|(_, _, r)| *r);
    Ok(LoadedInteractions {
        interactions: parsed.into_iter().map(|(i, _, _)| i).collect(),
        malformed,
        has_feedback,
        has_rating,
    })
}

/// Writes interactions as CSV with the `feedback` column (and `rating` when any record has one).
pub fn write_interactions_csv(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let with_rating = interactions.iter().any(|i| i.rating.is_some());
    let mut w = csv::Writer::from_path(path)?;
    if with_rating {
        w.write_record(["user_id", "item_id", "timestamp", "rating", "feedback"])?;
    } else {
        w.write_record(["user_id", "item_id", "timestamp", "feedback"])?;
    }
    for i in interactions {
        let ts = i.timestamp.to_string();
        if with_rating {
            let r = i.rating.map(|r| r.to_string()).unwrap_or_default();
            w.write_record([&i.user_id, &i.item_id, &ts, &r, i.feedback.as_str()])?;
        } else {
            w.write_record([&i.user_id, &i.item_id, &ts, i.feedback.as_str()])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Ratings 4 and 5 become positive feedback, 1 to 3 negative.
pub fn label_from_ratings(mut interactions: Vec<Interaction>) -> Result<Vec<Interaction>> {
    for (index, i) in interactions.iter_mut().enumerate() {
        let rating = i.rating.ok_or(HimError::MissingRating { index })?;
        i.feedback = if rating > 3 {
            Feedback::Positive
        } else {
            Feedback::Negative
        };
    }
    Ok(interactions)
}

/// Repeatedly drops users with fewer than `min_user_positives` positive
/// events and items seen by fewer than `min_item_users` distinct users until
/// both thresholds hold at once.
pub fn filter_sparse(
    mut interactions: Vec<Interaction>,
    min_user_positives: usize,
    min_item_users: usize,
) -> Vec<Interaction> {
    loop {
        let before = interactions.len();
        let mut positives: HashMap<&str, usize> = HashMap::new();
        for i in &interactions {
            let c = positives.entry(i.user_id.as_str()).or_default();
            if i.feedback == Feedback::Positive {
                *c += 1;
            }
        }
        let keep_users: HashSet<String> = positives
            .into_iter()
            .filter(|(_, c)| *c >= min_user_positives)
            .map(|(u, _)| u.to_string())
            .collect();
        interactions.retain(|i| keep_users.contains(&i.user_id));

        let mut item_users: HashMap<&str, HashSet<&str>> = HashMap::new();
        for i in &interactions {
            item_users
                .entry(i.item_id.as_str())
                .or_default()
                .insert(i.user_id.as_str());
        }
        let keep_items: HashSet<String> = item_users
            .into_iter()
            .filter(|(_, users)| users.len() >= min_item_users)
            .map(|(i, _)| i.to_string())
            .collect();
        interactions.retain(|i| keep_items.contains(&i.item_id));
        if interactions.len() == before {
            return interactions;
        }
    }
}

/// Bijective string <-> dense index map. Index 0 is reserved for padding and unknown strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    name: String,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    name: String,
    tokens: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        let index = r
            .tokens
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            name: r.name,
            tokens: r.tokens,
            index,
        }
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            name: v.name,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    pub const PAD: usize = 0;
    const PAD_TOKEN: &'static str = "<pad>";

    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            tokens: vec![Self::PAD_TOKEN.to_string()],
            index: HashMap::new(),
        }
    }

    pub fn from_tokens<'a>(
        name: impl Into<String>,
        tokens: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut v = Self::new(name);
        for t in tokens {
            v.insert(t);
        }
        v
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Index of `token`, inserting it if unseen.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or [`Vocabulary::PAD`] when unknown.
    pub fn index_or_pad(&self, token: &str) -> usize {
        self.get(token).unwrap_or(Self::PAD)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        if index == Self::PAD {
            return None;
        }
        self.tokens.get(index).map(String::as_str)
    }

    /// Number of indices including the PAD slot.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }
}

/// Side information for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub category: String,
    pub brand: String,
    pub shop: String,
    pub price: String,
}

/// Price text to a coarse log-scale bucket label; non-numeric text is kept as is.
pub fn price_bucket(price: &str) -> String {
    match price.trim().parse::<f64>() {
        Ok(p) if p.is_finite() && p >= 0.0 => {
            format!("p{}", ((1.0 + p).log2().floor() as u32).min(20))
        }
        _ => price.trim().to_string(),
    }
}

/// Reads `item_id,category,brand,shop,price`.
pub fn load_item_meta(path: &Path) -> Result<Vec<ItemMeta>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| HimError::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: ItemMeta = row?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_item_meta(path: &Path, items: &[ItemMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for it in items {
        w.serialize(it)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// A (user, target item) pair with a click label, at a point in time.
/// Its behavior history is every event of the user strictly before `timestamp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledSample {
    pub user: usize,
    pub item: usize,
    pub timestamp: u64,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Per-user shuffle, 70/10/20.
    RandomByUser,
    /// Time-ordered cut points, 70/10/20 by count.
    Temporal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub mode: SplitMode,
}

impl DatasetSplit {
    /// FNV-1a over the three sample lists; equal splits hash equal.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (tag, list) in [(1u64, &self.train), (2, &self.validation), (3, &self.test)] {
            feed(tag);
            for s in list {
                feed(s.user as u64);
                feed(s.item as u64);
                feed(s.timestamp);
                feed(s.label as u64);
            }
        }
        h
    }
}

/// For every positive sample, `ratio` label-0 samples whose items are drawn
/// uniformly from `catalog` minus the user's positive items (distinct per positive).
pub fn sample_negatives(
    positives: &[LabeledSample],
    catalog: &[usize],
    ratio: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if ratio == 0 {
        return Err(invalid("negative ratio", "must be at least 1"));
    }
    let catalog: Vec<usize> = {
        let mut c = catalog.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut user_pos: BTreeMap<usize, HashSet<usize>> = BTreeMap::new();
    for s in positives {
        user_pos.entry(s.user).or_default().insert(s.item);
    }
    for (user, items) in &user_pos {
        let excluded = catalog.iter().filter(|i| items.contains(i)).count();
        if catalog.len() - excluded < ratio {
            return Err(invalid(
                "catalog",
                format!(
                    "user {user}: {} candidates left for {ratio} negatives",
                    catalog.len() - excluded
                ),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(positives.len() * ratio);
    let mut drawn = Vec::with_capacity(ratio);
    for s in positives {
        let exclude = &user_pos[&s.user];
        drawn.clear();
        while drawn.len() < ratio {
            let item = catalog[rng.gen_range(0..catalog.len())];
            if !exclude.contains(&item) && !drawn.contains(&item) {
                drawn.push(item);
            }
        }
        out.extend(drawn.iter().map(|&item| LabeledSample {
            user: s.user,
            item,
            timestamp: s.timestamp,
            label: 0,
        }));
    }
    Ok(out)
}

const SPLIT_SHARES: [f64; 3] = [0.7, 0.1, 0.2];

/// Splits samples 70/10/20.
///
/// `RandomByUser` shuffles each user's samples and deals them out so that every
/// prefix of the deal stays within one sample of the target shares; this gives
/// per-user stratification and global counts within ±1. `Temporal` orders by
/// timestamp and cuts at 70% and 80%.
pub fn split_dataset(
    samples: &[LabeledSample],
    mode: SplitMode,
    seed: u64,
) -> Result<DatasetSplit> {
    if samples.len() < 10 {
        return Err(invalid(
            "split",
            format!("{} samples; need at least 10", samples.len()),
        ));
    }
    let mut buckets: [Vec<LabeledSample>; 3] = Default::default();
    match mode {
        SplitMode::RandomByUser => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut by_user: BTreeMap<usize, Vec<LabeledSample>> = BTreeMap::new();
            for s in samples {
                by_user.entry(s.user).or_default().push(*s);
            }
            let mut counts = [0usize; 3];
            let mut dealt = 0usize;
            for list in by_user.values_mut() {
                list.shuffle(&mut rng);
                for s in list.iter() {
                    dealt += 1;
                    let b = (0..3)
                        .max_by(|&a, &b| {
                            let da = SPLIT_SHARES[a] * dealt as f64 - counts[a] as f64;
                            let db = SPLIT_SHARES[b] * dealt as f64 - counts[b] as f64;
                            da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                        })
                        .unwrap();
                    counts[b] += 1;
                    buckets[b].push(*s);
                }
            }
        }
        SplitMode::Temporal => {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.sort_by_key(|&i| (samples[i].timestamp, i));
            let n = samples.len();
            let cut1 = (n as f64 * SPLIT_SHARES[0]).round() as usize;
            let cut2 = (n as f64 * (SPLIT_SHARES[0] + SPLIT_SHARES[1])).round() as usize;
            for (pos, &i) in order.iter().enumerate() {
                let b = if pos < cut1 {
                    0
                } else if pos < cut2 {
                    1
                } else {
                    2
                };
                buckets[b].push(samples[i]);
            }
        }
    }
    let [train, validation, test] = buckets;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        mode,
    })
}

/// One indexed event in a user's history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: u64,
    pub item: usize,
    pub feedback: Feedback,
}

/// Indexed interaction log with vocabularies and item side information.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub users: Vocabulary,
    pub items: Vocabulary,
    pub categories: Vocabulary,
    pub brands: Vocabulary,
    pub shops: Vocabulary,
    pub prices: Vocabulary,
    /// `[category, brand, shop, price]` per item index; PAD for unknown.
    pub item_meta: Vec<[usize; 4]>,
    /// Per user, sorted by (timestamp, item, feedback).
    pub histories: Vec<Vec<Event>>,
    pub has_real_negatives: bool,
}

impl Dataset {
    pub fn build(
        interactions: &[Interaction],
        meta: &[ItemMeta],
        has_real_negatives: bool,
    ) -> Self {
        let mut users = Vocabulary::new("user");
        let mut items = Vocabulary::new("item");
        for i in interactions {
            users.insert(&i.user_id);
            items.insert(&i.item_id);
        }
        Self::with_vocabularies(users, items, interactions, meta, has_real_negatives)
    }

    /// Indexes `interactions` against fixed user/item vocabularies; unknown ids map to PAD.
    pub fn with_vocabularies(
        users: Vocabulary,
        items: Vocabulary,
        interactions: &[Interaction],
        meta: &[ItemMeta],
        has_real_negatives: bool,
    ) -> Self {
        let mut categories = Vocabulary::new("category");
        let mut brands = Vocabulary::new("brand");
        let mut shops = Vocabulary::new("shop");
        let mut prices = Vocabulary::new("price");
        let mut item_meta = vec![[Vocabulary::PAD; 4]; items.size()];
        for m in meta {
            if let Some(idx) = items.get(&m.item_id) {
                item_meta[idx] = [
                    categories.insert(&m.category),
                    brands.insert(&m.brand),
                    shops.insert(&m.shop),
                    prices.insert(&price_bucket(&m.price)),
                ];
            }
        }
        let mut histories = vec![Vec::new(); users.size()];
        for i in interactions {
            let u = users.index_or_pad(&i.user_id);
            histories[u].push(Event {
                timestamp: i.timestamp,
                item: items.index_or_pad(&i.item_id),
                feedback: i.feedback,
            });
        }
        for h in &mut histories {
            h.sort_unstable();
        }
        Self {
            users,
            items,
            categories,
            brands,
            shops,
            prices,
            item_meta,
            histories,
            has_real_negatives,
        }
    }

    /// Replaces side-information vocabularies (used when restoring a trained model).
    pub fn remap_meta(&mut self, meta: &[ItemMeta], vocabs: [&Vocabulary; 4]) {
        self.categories = vocabs[0].clone();
        self.brands = vocabs[1].clone();
        self.shops = vocabs[2].clone();
        self.prices = vocabs[3].clone();
        self.item_meta = vec![[Vocabulary::PAD; 4]; self.items.size()];
        for m in meta {
            if let Some(idx) = self.items.get(&m.item_id) {
                self.item_meta[idx] = [
                    vocabs[0].index_or_pad(&m.category),
                    vocabs[1].index_or_pad(&m.brand),
                    vocabs[2].index_or_pad(&m.shop),
                    vocabs[3].index_or_pad(&price_bucket(&m.price)),
                ];
            }
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.size()
    }

    /// Events of `user` strictly before `timestamp`.
    pub fn history_before(&self, user: usize, timestamp: u64) -> &[Event] {
        let h = &self.histories[user];
        &h[..h.partition_point(|e| e.timestamp < timestamp)]
    }

    /// Number of positive events per user over the whole log.
    pub fn positive_counts(&self) -> Vec<usize> {
        self.histories
            .iter()
            .map(|h| {
                h.iter()
                    .filter(|e| e.feedback == Feedback::Positive)
                    .count()
            })
            .collect()
    }

    /// Every interaction as a labeled sample (positive -> 1), in user/time order.
    pub fn interaction_samples(&self) -> Vec<LabeledSample> {
        let mut out = Vec::new();
        for (user, h) in self.histories.iter().enumerate() {
            for e in h {
                out.push(LabeledSample {
                    user,
                    item: e.item,
                    timestamp: e.timestamp,
                    label: u8::from(e.feedback == Feedback::Positive),
                });
            }
        }
        out
    }

    /// Item indices excluding PAD.
    pub fn catalog(&self) -> Vec<usize> {
        (1..self.items.size()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn inter(u: &str, i: &str, t: u64, f: Feedback) -> Interaction {
        Interaction {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: t,
            feedback: f,
            rating: None,
        }
    }

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn csv_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "user_id,item_id,timestamp,rating\nu1,i1,10,5\nu1,i2,20,2\nu2,i1,30,4\n",
        );
        let l = load_interactions(&p, InputFormat::Csv).unwrap();
        assert_eq!(l.interactions.len(), 3);
        assert_eq!(l.malformed, 0);
        assert!(l.has_rating && !l.has_feedback);
        assert_eq!(l.interactions[1].rating, Some(2));
        assert_eq!(l.interactions[2].timestamp, 30);
    }

    #[test]
    fn csv_skips_one_malformed_of_ten() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("user_id,item_id,timestamp\n");
        for k in 0..9 {
            text.push_str(&format!("u{k},i{k},{}\n", 100 + k));
        }
        text.push_str("u9,i9,not-a-time\n");
        let p = write(dir.path(), "b.csv", &text);
        let l = load_interactions(&p, InputFormat::Csv).unwrap();
        assert_eq!(l.interactions.len(), 9);
        assert_eq!(l.malformed, 1);
    }

    #[test]
    fn too_many_malformed_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.csv",
            "user_id,item_id,timestamp\nu,i,1\nu,i,x\nu,i,y\n",
        );
        assert!(matches!(
            load_interactions(&p, InputFormat::Csv),
            Err(HimError::TooManyMalformed { malformed: 2, .. })
        ));
    }

    #[test]
    fn missing_file_is_fatal() {
        assert!(matches!(
            load_interactions(Path::new("/nonexistent/x.csv"), InputFormat::Csv),
            Err(HimError::Io { .. })
        ));
    }

    #[test]
    fn rating_out_of_range_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("user_id,item_id,timestamp,rating\n");
        for k in 0..20 {
            text.push_str(&format!("u,i{k},{k},3\n"));
        }
        text.push_str("u,i,1,9\n");
        let p = write(dir.path(), "d.csv", &text);
        let l = load_interactions(&p, InputFormat::Csv).unwrap();
        assert_eq!(l.malformed, 1);
    }

    #[test]
    fn rating_labels() {
        let mut a = inter("u", "i", 1, Feedback::Positive);
        a.rating = Some(4);
        let mut b = a.clone();
        b.rating = Some(3);
        let out = label_from_ratings(vec![a, b]).unwrap();
        assert_eq!(out[0].feedback, Feedback::Positive);
        assert_eq!(out[1].feedback, Feedback::Negative);
        assert!(label_from_ratings(vec![]).unwrap().is_empty());
        let c = inter("u", "i", 1, Feedback::Positive);
        assert!(matches!(
            label_from_ratings(vec![c]),
            Err(HimError::MissingRating { index: 0 })
        ));
    }

    #[test]
    fn item_below_user_threshold_removed() {
        let mut v = Vec::new();
        for u in 0..4 {
            v.push(inter(&format!("u{u}"), "rare", 1, Feedback::Positive));
            v.push(inter(&format!("u{u}"), "common", 2, Feedback::Positive));
        }
        v.push(inter("u4", "common", 3, Feedback::Positive));
        let out = filter_sparse(v, 1, 5);
        assert!(out.iter().all(|i| i.item_id == "common"));
        assert_eq!(out.len(), 5);
    }

    #[test]
    fn filter_identity_when_thresholds_hold() {
        let v: Vec<_> = (0..3)
            .map(|u| inter(&format!("u{u}"), "a", u as u64, Feedback::Positive))
            .collect();
        assert_eq!(filter_sparse(v.clone(), 1, 3), v);
    }

    #[test]
    fn vocabulary_reserves_pad() {
        let mut v = Vocabulary::new("x");
        assert_eq!(v.insert("a"), 1);
        assert_eq!(v.insert("b"), 2);
        assert_eq!(v.insert("a"), 1);
        assert_eq!(v.size(), 3);
        assert_eq!(v.index_or_pad("zzz"), Vocabulary::PAD);
        assert_eq!(v.token(0), None);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn negatives_avoid_user_positives() {
        let pos = vec![LabeledSample {
            user: 1,
            item: 3,
            timestamp: 5,
            label: 1,
        }];
        let catalog: Vec<usize> = (1..=10).collect();
        let neg = sample_negatives(&pos, &catalog, 5, 9).unwrap();
        assert_eq!(neg.len(), 5);
        assert!(neg
            .iter()
            .all(|n| n.item != 3 && n.label == 0 && n.user == 1));
        assert!(sample_negatives(&pos, &catalog, 0, 9).is_err());
        assert!(sample_negatives(&pos, &[3, 4], 5, 9).is_err());
    }

    #[test]
    fn split_rejects_tiny_inputs() {
        let s: Vec<_> = (0..9)
            .map(|k| LabeledSample {
                user: 1,
                item: k,
                timestamp: k as u64,
                label: 1,
            })
            .collect();
        assert!(split_dataset(&s, SplitMode::RandomByUser, 0).is_err());
    }

    #[test]
    fn price_buckets_are_log_scale() {
        assert_eq!(price_bucket("0"), "p0");
        assert_eq!(price_bucket("3"), "p2");
        assert_eq!(price_bucket("1000"), "p9");
        assert_eq!(price_bucket("n/a"), "n/a");
    }
}
