mod common;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use him_core::checkpoint::ModelCheckpoint;
use him_core::config::{HimConfig, Variant};
use him_core::data::{
    filter_sparse, load_interactions, load_item_meta, split_dataset, write_interactions_csv,
    write_item_meta, Dataset, Feedback, InputFormat, Interaction, LabeledSample, SplitMode,
};
use him_core::model::Batch;
use him_core::prep::{prepare, prepare_labeled};
use him_core::train::train;
use proptest::prelude::*;

fn interaction_strategy() -> impl Strategy<Value = Interaction> {
    (
        0..6usize,
        0..9usize,
        0..1_000_000u64,
        any::<bool>(),
        prop::option::of(1..=5u8),
    )
        .prop_map(|(u, i, t, p, r)| Interaction {
            user_id: format!("user-{u}"),
            item_id: format!("item,{i}"),
            timestamp: t,
            feedback: if p {
                Feedback::Positive
            } else {
                Feedback::Negative
            },
            rating: r,
        })
}

fn write_text(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::File::create(&p)
        .unwrap()
        .write_all(text.as_bytes())
        .unwrap();
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(log in prop::collection::vec(interaction_strategy(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_interactions_csv(&path, &log).unwrap();
        let loaded = load_interactions(&path, InputFormat::Csv).unwrap();
        prop_assert_eq!(loaded.malformed, 0);
        prop_assert!(loaded.has_feedback);
        prop_assert_eq!(loaded.has_rating, log.iter().any(|i| i.rating.is_some()));
        prop_assert_eq!(loaded.interactions, log);
    }

    #[test]
    fn jsonl_round_trip(log in prop::collection::vec(interaction_strategy(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let text: String = log
            .iter()
            .map(|i| {
                let mut v = serde_json::json!({
                    "user_id": i.user_id,
                    "item_id": i.item_id,
                    "timestamp": i.timestamp,
                    "feedback": i.feedback.as_str(),
                });
                if let Some(r) = i.rating {
                    v["rating"] = serde_json::json!(r);
                }
                format!("{v}\n")
            })
            .collect();
        let path = write_text(dir.path(), "log.jsonl", &text);
        let loaded = load_interactions(&path, InputFormat::from_path(&path)).unwrap();
        prop_assert_eq!(loaded.interactions, log);
    }

    #[test]
    fn filter_reaches_a_fixed_point(
        log in prop::collection::vec(interaction_strategy(), 0..80),
        min_user in 1..4usize,
        min_item in 1..4usize,
    ) {
        let once = filter_sparse(log.clone(), min_user, min_item);
        prop_assert_eq!(filter_sparse(once.clone(), min_user, min_item), once.clone());
        let mut positives: BTreeMap<&str, usize> = BTreeMap::new();
        let mut item_users: BTreeMap<&str, HashSet<&str>> = BTreeMap::new();
        for i in &once {
            *positives.entry(&i.user_id).or_default() += usize::from(i.feedback == Feedback::Positive);
            item_users.entry(&i.item_id).or_default().insert(&i.user_id);
        }
        prop_assert!(positives.values().all(|&c| c >= min_user));
        prop_assert!(item_users.values().all(|u| u.len() >= min_item));
        // Only whole records are removed, in order.
        let mut rest = log.iter();
        for kept in &once {
            prop_assert!(rest.any(|i| i == kept));
        }
    }

    #[test]
    fn random_split_is_a_stratified_partition(
        users in prop::collection::vec(1..30usize, 1..20),
        seed in any::<u64>(),
    ) {
        let mut samples = Vec::new();
        for (u, &n) in users.iter().enumerate() {
            for k in 0..n {
                samples.push(LabeledSample { user: u + 1, item: k + 1, timestamp: k as u64, label: (k % 2) as u8 });
            }
        }
        prop_assume!(samples.len() >= 10);
        let split = split_dataset(&samples, SplitMode::RandomByUser, seed).unwrap();
        let total = samples.len() as f64;
        for (part, share) in [(&split.train, 0.7), (&split.validation, 0.1), (&split.test, 0.2)] {
            prop_assert!((part.len() as f64 - share * total).abs() <= 1.0 + 1e-9);
        }
        let mut all: Vec<LabeledSample> = split.train.iter().chain(&split.validation).chain(&split.test).copied().collect();
        all.sort_by_key(|s| (s.user, s.item));
        prop_assert_eq!(&all, &samples);
        // Per user, the deal never drifts more than a couple of samples from the shares.
        for (u, &n) in users.iter().enumerate() {
            let train = split.train.iter().filter(|s| s.user == u + 1).count() as f64;
            prop_assert!((train - 0.7 * n as f64).abs() <= 2.0, "user {} has {} of {} in train", u, train, n);
        }
        let again = split_dataset(&samples, SplitMode::RandomByUser, seed).unwrap();
        prop_assert_eq!(again.fingerprint(), split.fingerprint());
    }
}

#[test]
fn temporal_split_orders_by_time() {
    let samples: Vec<LabeledSample> = (0..50)
        .map(|k| LabeledSample {
            user: 1 + k % 3,
            item: 1,
            timestamp: (50 - k) as u64,
            label: 1,
        })
        .collect();
    let split = split_dataset(&samples, SplitMode::Temporal, 0).unwrap();
    assert_eq!(
        (split.train.len(), split.validation.len(), split.test.len()),
        (35, 5, 10)
    );
    let last_train = split.train.iter().map(|s| s.timestamp).max().unwrap();
    let first_test = split.test.iter().map(|s| s.timestamp).min().unwrap();
    assert!(last_train < first_test);
}

#[test]
fn malformed_rows_are_counted_until_the_limit() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("user_id,item_id,timestamp,feedback\n");
    for k in 0..19 {
        text.push_str(&format!("u{k},i{k},{k},1\n"));
    }
    text.push_str("u,i,not-a-time,1\n");
    let p = write_text(dir.path(), "ok.csv", &text);
    let l = load_interactions(&p, InputFormat::Csv).unwrap();
    assert_eq!((l.interactions.len(), l.malformed), (19, 1));
    text.push_str("u,,5,1\nu,i,5,maybe\n");
    let p = write_text(dir.path(), "bad.csv", &text);
    assert!(load_interactions(&p, InputFormat::Csv).is_err());
    let p = write_text(
        dir.path(),
        "bad.jsonl",
        "{\"user_id\": 1}\n{\"user_id\": \"a\", \"item_id\": 2, \"timestamp\": 3}\n",
    );
    assert!(load_interactions(&p, InputFormat::Jsonl).is_err());
}

#[test]
fn item_meta_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let meta = common::meta(7);
    let p = dir.path().join("items.csv");
    write_item_meta(&p, &meta).unwrap();
    assert_eq!(load_item_meta(&p).unwrap(), meta);
}

#[test]
fn rating_logs_get_sampled_negatives() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("user_id,item_id,timestamp,rating\n");
    for u in 0..6 {
        for k in 0..4 {
            text.push_str(&format!(
                "u{u},i{},{},{}\n",
                (u + k) % 12,
                100 + k,
                1 + (u + k) % 5
            ));
        }
    }
    let p = write_text(dir.path(), "r.csv", &text);
    let loaded = load_interactions(&p, InputFormat::Csv).unwrap();
    let cfg = HimConfig {
        min_item_users: 1,
        negative_ratio: 2,
        ..HimConfig::default()
    };
    let prep = prepare(loaded, &common::meta(12), &cfg).unwrap();
    assert!(!prep.summary.has_real_negatives);
    let all: Vec<LabeledSample> = prep
        .split
        .train
        .iter()
        .chain(&prep.split.validation)
        .chain(&prep.split.test)
        .copied()
        .collect();
    let pos = all.iter().filter(|s| s.label == 1).count();
    assert_eq!(all.len() - pos, 2 * pos);
    // Sampled negatives never hit an item the user clicked.
    for s in all.iter().filter(|s| s.label == 0) {
        assert!(!prep.dataset.histories[s.user]
            .iter()
            .any(|e| e.item == s.item && e.feedback == Feedback::Positive));
    }
}

#[test]
fn model_inputs_ignore_events_at_or_after_the_sample() {
    let prep = common::small_synth(60, 4);
    let data = &prep.dataset;
    let samples: Vec<LabeledSample> = prep.split.test.iter().take(40).copied().collect();
    for variant in Variant::ALL {
        let cfg = HimConfig {
            variant,
            ..HimConfig::default()
        };
        let spec =
            him_core::model::ModelSpec::new(&cfg, him_core::model::TableSizes::of(data), true)
                .unwrap();
        for s in &samples {
            let mut future = data.clone();
            // Rewrite everything the sample must not see.
            for e in future.histories[s.user]
                .iter_mut()
                .filter(|e| e.timestamp >= s.timestamp)
            {
                e.item = 1 + (e.item % (data.items.size() - 1));
                e.feedback = Feedback::Positive;
            }
            future.histories[s.user].push(him_core::data::Event {
                timestamp: u64::MAX,
                item: 1,
                feedback: Feedback::Positive,
            });
            future.histories[s.user].sort_unstable();
            let a = Batch::build(&spec, data, std::slice::from_ref(s)).unwrap();
            let b = Batch::build(&spec, &future, std::slice::from_ref(s)).unwrap();
            assert_eq!(a, b, "{variant:?} sample {s:?}");
        }
    }
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let synth = him_core::synth::SynthSpec {
        users: 50,
        items: 60,
        groups: 3,
        categories_per_group: 2,
        ..Default::default()
    }
    .generate()
    .unwrap();
    let cfg = HimConfig {
        min_item_users: 1,
        epochs: 1,
        mlp_dims: vec![8, 2],
        batch_size: 64,
        ..HimConfig::default()
    };
    let prep = prepare_labeled(synth.interactions.clone(), &synth.items, &cfg, true).unwrap();
    let out = train::<f64>(&cfg, &prep.dataset, &prep.split).unwrap();
    let ckpt = ModelCheckpoint::capture(&cfg, &out.model, &prep.dataset);
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let restored = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(restored, ckpt);
    let model = restored.model::<f64>().unwrap();
    let want = out
        .model
        .predict(&prep.dataset, &prep.split.test, 128)
        .unwrap();
    assert_eq!(
        model.predict(&prep.dataset, &prep.split.test, 128).unwrap(),
        want
    );

    // Re-indexing the raw log against the stored vocabularies gives the same scores.
    let kept: HashSet<&str> = (1..prep.dataset.num_users())
        .map(|u| prep.dataset.users.token(u).unwrap())
        .collect();
    let log: Vec<Interaction> = synth
        .interactions
        .iter()
        .filter(|i| kept.contains(i.user_id.as_str()))
        .cloned()
        .collect();
    let fresh: Dataset = restored.dataset(&log, &synth.items);
    let remapped: Vec<LabeledSample> = prep
        .split
        .test
        .iter()
        .map(|s| LabeledSample {
            user: fresh
                .users
                .get(prep.dataset.users.token(s.user).unwrap())
                .unwrap(),
            item: fresh
                .items
                .get(prep.dataset.items.token(s.item).unwrap())
                .unwrap(),
            ..*s
        })
        .collect();
    assert_eq!(model.predict(&fresh, &remapped, 128).unwrap(), want);
}
