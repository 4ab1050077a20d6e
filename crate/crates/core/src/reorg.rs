//! Reorganization of a user's history into backward-looking time sessions,
//! each holding its positive and negative items ranked by frequency.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Event, Feedback, Vocabulary};
use crate::error::{invalid, Result};

pub const DAY: u64 = 86_400;
pub const MONTH: u64 = 30 * DAY;
pub const YEAR: u64 = 365 * DAY;

/// Cut points measured backward from a reference time.
///
/// Session `i` holds events whose age `a` satisfies `cuts[i-1] <= a < cuts[i]`
/// (with `cuts[-1] = 0`). With a catch-all, one more session holds everything
/// older than the last cut; without it, such events are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct SessionBoundaries {
    cuts: Vec<u64>,
    labels: Vec<String>,
    catch_all: bool,
}

/// Parses `"14d"`, `"6m"`, `"12h"`, `"2w"`, `"1y"` or bare seconds.
pub fn parse_duration(text: &str) -> Result<u64> {
    let t = text.trim();
    let (num, unit) = match t.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => (&t[..i], c),
        _ => (t, 's'),
    };
    let n: u64 = num
        .parse()
        .map_err(|_| invalid("duration", format!("{text:?}")))?;
    let unit = match unit {
        's' => 1,
        'h' => 3_600,
        'd' => DAY,
        'w' => 7 * DAY,
        'm' => MONTH,
        'y' => YEAR,
        _ => return Err(invalid("duration", format!("unknown unit in {text:?}"))),
    };
    Ok(n * unit)
}

impl SessionBoundaries {
    pub fn new(cuts: Vec<u64>, catch_all: bool) -> Result<Self> {
        if cuts.is_empty() && !catch_all {
            return Err(invalid("sessions", "no sessions"));
        }
        if cuts.first() == Some(&0) || cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(
                "sessions",
                format!("cuts must be positive and strictly increasing: {cuts:?}"),
            ));
        }
        let mut labels: Vec<String> = cuts.iter().map(|c| format!("{c}s")).collect();
        if catch_all {
            labels.push("all".into());
        }
        Ok(Self {
            cuts,
            labels,
            catch_all,
        })
    }

    /// From labels such as `["14d", "6m", "12m", "all"]`. `"all"` may only come last.
    pub fn parse<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let mut cuts = Vec::new();
        let mut catch_all = false;
        for (i, l) in labels.iter().enumerate() {
            let l = l.as_ref().trim();
            if l.eq_ignore_ascii_case("all") {
                if i + 1 != labels.len() {
                    return Err(invalid("sessions", "\"all\" must be the last session"));
                }
                catch_all = true;
            } else {
                cuts.push(parse_duration(l)?);
            }
        }
        let mut b = Self::new(cuts, catch_all)?;
        b.labels = labels
            .iter()
            .map(|l| l.as_ref().trim().to_string())
            .collect();
        Ok(b)
    }

    /// The four-session default: 14 days, 6 months, 12 months, everything older.
    pub fn standard() -> Self {
        Self::parse(&["14d", "6m", "12m", "all"]).expect("valid default sessions")
    }

    /// Number of sessions T.
    pub fn len(&self) -> usize {
        self.cuts.len() + usize::from(self.catch_all)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Session index for an event of the given age, if any.
    pub fn session_of(&self, age: u64) -> Option<usize> {
        let i = self.cuts.partition_point(|&c| c <= age);
        (i < self.cuts.len() || self.catch_all).then_some(i)
    }
}

impl TryFrom<Vec<String>> for SessionBoundaries {
    type Error = crate::HimError;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::parse(&v)
    }
}

impl From<SessionBoundaries> for Vec<String> {
    fn from(b: SessionBoundaries) -> Self {
        b.labels
    }
}

impl fmt::Display for SessionBoundaries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.labels.join(","))
    }
}

/// Buckets `history` into sessions by age relative to `ref_time`.
pub fn sessionize(
    history: &[Event],
    boundaries: &SessionBoundaries,
    ref_time: u64,
) -> Result<Vec<Vec<Event>>> {
    let mut buckets = vec![Vec::new(); boundaries.len()];
    for e in history {
        if e.timestamp > ref_time {
            return Err(invalid(
                "history",
                format!(
                    "event at {} is after reference time {ref_time}",
                    e.timestamp
                ),
            ));
        }
        if let Some(s) = boundaries.session_of(ref_time - e.timestamp) {
            buckets[s].push(*e);
        }
    }
    Ok(buckets)
}

/// Top items of one session and sign, most frequent first, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankedFeedback {
    pub items: Vec<usize>,
    pub freqs: Vec<u32>,
    pub mask: Vec<bool>,
}

impl RankedFeedback {
    pub fn empty(n: usize) -> Self {
        Self {
            items: vec![Vocabulary::PAD; n],
            freqs: vec![0; n],
            mask: vec![false; n],
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.first().copied().unwrap_or(false)
    }
}

/// Counts distinct items in `bucket` and keeps the `n` most frequent.
/// Ties go to the more recent item, then the lower item index.
pub fn frequency_rank(bucket: &[Event], n: usize) -> RankedFeedback {
    let mut stats: HashMap<usize, (u32, u64)> = HashMap::new();
    for e in bucket {
        let s = stats.entry(e.item).or_insert((0, 0));
        s.0 += 1;
        s.1 = s.1.max(e.timestamp);
    }
    let mut ranked: Vec<(usize, u32, u64)> =
        stats.into_iter().map(|(i, (c, t))| (i, c, t)).collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    let mut out = RankedFeedback::empty(n);
    for (slot, (item, count, _)) in ranked.into_iter().take(n).enumerate() {
        out.items[slot] = item;
        out.freqs[slot] = count;
        out.mask[slot] = true;
    }
    out
}

/// Per-session ranked positive and negative feedback of one user at one point in time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionizedHistory {
    pub positive: Vec<RankedFeedback>,
    pub negative: Vec<RankedFeedback>,
}

impl SessionizedHistory {
    pub fn sessions(&self) -> usize {
        self.positive.len()
    }

    /// A session takes part in the model only if it holds at least one positive item.
    pub fn active(&self, session: usize) -> bool {
        !self.positive[session].is_empty()
    }
}

pub fn reorganize(
    history: &[Event],
    boundaries: &SessionBoundaries,
    n_pos: usize,
    n_neg: usize,
    ref_time: u64,
) -> Result<SessionizedHistory> {
    let buckets = sessionize(history, boundaries, ref_time)?;
    let mut positive = Vec::with_capacity(buckets.len());
    let mut negative = Vec::with_capacity(buckets.len());
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for b in &buckets {
        pos.clear();
        neg.clear();
        for e in b {
            match e.feedback {
                Feedback::Positive => pos.push(*e),
                Feedback::Negative => neg.push(*e),
            }
        }
        positive.push(frequency_rank(&pos, n_pos));
        negative.push(frequency_rank(&neg, n_neg));
    }
    Ok(SessionizedHistory { positive, negative })
}
