use std::collections::BTreeMap;

use him_core::data::{Event, Feedback};
use him_core::reorg::{reorganize, sessionize, RankedFeedback, SessionBoundaries, DAY, MONTH};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOW: u64 = 5_000 * DAY;

fn event_strategy() -> impl Strategy<Value = Event> {
    (1..12usize, 0..900 * DAY, any::<bool>()).prop_map(|(item, age, p)| Event {
        timestamp: NOW - age,
        item,
        feedback: if p {
            Feedback::Positive
        } else {
            Feedback::Negative
        },
    })
}

/// Session index by explicit comparison against the cut list.
fn session_by_scan(age: u64, cuts: &[u64], catch_all: bool) -> Option<usize> {
    for (i, &c) in cuts.iter().enumerate() {
        if age < c {
            return Some(i);
        }
    }
    catch_all.then_some(cuts.len())
}

/// Count, latest time and rank by sorting whole tuples.
fn rank_by_sort(events: &[Event], n: usize) -> RankedFeedback {
    let mut stats: BTreeMap<usize, (u32, u64)> = BTreeMap::new();
    for e in events {
        let s = stats.entry(e.item).or_default();
        s.0 += 1;
        s.1 = s.1.max(e.timestamp);
    }
    let mut keyed: Vec<(std::cmp::Reverse<u32>, std::cmp::Reverse<u64>, usize)> = stats
        .iter()
        .map(|(&i, &(c, t))| (std::cmp::Reverse(c), std::cmp::Reverse(t), i))
        .collect();
    keyed.sort();
    let mut out = RankedFeedback::empty(n);
    for (slot, (c, _, i)) in keyed.into_iter().take(n).enumerate() {
        out.items[slot] = i;
        out.freqs[slot] = c.0;
        out.mask[slot] = true;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_the_sorting_oracle(
        history in prop::collection::vec(event_strategy(), 0..60),
        n in 1..6usize,
        n_neg in 1..6usize,
        catch_all in any::<bool>(),
    ) {
        let cuts = vec![14 * DAY, 6 * MONTH, 12 * MONTH];
        let b = SessionBoundaries::new(cuts.clone(), catch_all).unwrap();
        let h = reorganize(&history, &b, n, n_neg, NOW).unwrap();
        prop_assert_eq!(h.sessions(), b.len());
        for s in 0..b.len() {
            let inside: Vec<Event> = history
                .iter()
                .filter(|e| session_by_scan(NOW - e.timestamp, &cuts, catch_all) == Some(s))
                .copied()
                .collect();
            let pos: Vec<Event> = inside.iter().filter(|e| e.feedback == Feedback::Positive).copied().collect();
            let neg: Vec<Event> = inside.iter().filter(|e| e.feedback == Feedback::Negative).copied().collect();
            prop_assert_eq!(&h.positive[s], &rank_by_sort(&pos, n));
            prop_assert_eq!(&h.negative[s], &rank_by_sort(&neg, n_neg));
            prop_assert_eq!(h.active(s), !pos.is_empty());
            // Masks are a prefix and frequencies never increase along it.
            let r = &h.positive[s];
            prop_assert!(r.mask.windows(2).all(|w| w[0] || !w[1]));
            prop_assert!(r.freqs.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sessions_partition_events_with_catch_all(history in prop::collection::vec(event_strategy(), 0..60)) {
        let b = SessionBoundaries::standard();
        let buckets = sessionize(&history, &b, NOW).unwrap();
        prop_assert_eq!(buckets.iter().map(Vec::len).sum::<usize>(), history.len());
    }
}

#[test]
fn permuted_histories_reorganize_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let b = SessionBoundaries::standard();
    for _ in 0..50 {
        let len = rng.gen_range(1..80);
        // Few items and coarse times so count and recency ties are common.
        let mut history: Vec<Event> = (0..len)
            .map(|_| Event {
                timestamp: NOW - rng.gen_range(0..40) * 10 * DAY,
                item: rng.gen_range(1..8),
                feedback: if rng.gen_bool(0.6) {
                    Feedback::Positive
                } else {
                    Feedback::Negative
                },
            })
            .collect();
        let want = reorganize(&history, &b, 5, 5, NOW).unwrap();
        for _ in 0..100 {
            history.shuffle(&mut rng);
            assert_eq!(reorganize(&history, &b, 5, 5, NOW).unwrap(), want);
        }
    }
}

#[test]
fn boundaries_round_trip_through_labels() {
    let b = SessionBoundaries::parse(&["12h", "2w", "1y", "all"]).unwrap();
    let again = SessionBoundaries::parse(b.labels()).unwrap();
    assert_eq!(again, b);
    assert_eq!(b.session_of(12 * 3_600 - 1), Some(0));
    assert_eq!(b.session_of(12 * 3_600), Some(1));
    let json = serde_json::to_string(&b).unwrap();
    assert_eq!(serde_json::from_str::<SessionBoundaries>(&json).unwrap(), b);
}
