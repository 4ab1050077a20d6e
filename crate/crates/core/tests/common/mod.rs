#![allow(dead_code)]

pub mod reference;

use him_autograd::ParamStore;
use him_core::config::{HimConfig, Variant};
use him_core::data::{Dataset, Feedback, Interaction, ItemMeta, LabeledSample};
use him_core::prep::{prepare_labeled, Prepared};
use him_core::reorg::{SessionBoundaries, DAY};
use him_core::synth::SynthSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NOW: u64 = 2_000 * DAY;

pub fn interaction(user: usize, item: usize, days_ago: u64, positive: bool) -> Interaction {
    Interaction {
        user_id: format!("u{user}"),
        item_id: format!("i{item}"),
        timestamp: NOW - days_ago * DAY,
        feedback: if positive {
            Feedback::Positive
        } else {
            Feedback::Negative
        },
        rating: None,
    }
}

pub fn meta(items: usize) -> Vec<ItemMeta> {
    (0..items)
        .map(|i| ItemMeta {
            item_id: format!("i{i}"),
            category: format!("c{}", i % 3),
            brand: format!("b{}", i % 2),
            shop: format!("s{}", i % 4),
            price: format!("{}", 5 * i),
        })
        .collect()
}

/// Three users with mixed feedback spread over two sessions (14 days, older).
pub fn micro_dataset() -> Dataset {
    let log = vec![
        interaction(0, 0, 40, true),
        interaction(0, 1, 30, true),
        interaction(0, 1, 20, true),
        interaction(0, 2, 3, true),
        interaction(0, 3, 2, false),
        interaction(0, 4, 50, false),
        interaction(1, 2, 60, true),
        interaction(1, 4, 5, true),
        interaction(1, 0, 4, false),
        interaction(1, 0, 45, false),
        interaction(2, 3, 100, true),
        interaction(2, 1, 1, false),
        interaction(2, 5, 7, true),
        interaction(2, 5, 6, true),
    ];
    Dataset::build(&log, &meta(6), true)
}

/// One sample per user at `NOW`, targets chosen so labels are mixed.
pub fn micro_samples(data: &Dataset) -> Vec<LabeledSample> {
    let u = |s: &str| data.users.get(s).unwrap();
    let i = |s: &str| data.items.get(s).unwrap();
    vec![
        LabeledSample {
            user: u("u0"),
            item: i("i4"),
            timestamp: NOW,
            label: 1,
        },
        LabeledSample {
            user: u("u1"),
            item: i("i1"),
            timestamp: NOW,
            label: 0,
        },
        LabeledSample {
            user: u("u2"),
            item: i("i0"),
            timestamp: NOW,
            label: 1,
        },
    ]
}

/// n=2, T=2, d=2, h=2, k=2, p=1.
pub fn micro_config(variant: Variant) -> HimConfig {
    HimConfig {
        variant,
        sessions: SessionBoundaries::parse(&["14d", "all"]).unwrap(),
        top_n: 2,
        top_n_negative: 2,
        embedding_dim: 2,
        gru_hidden: 2,
        groups: 2,
        group_dim: 2,
        negative_users: 1,
        mlp_dims: vec![3, 2],
        alpha: Some(1.0),
        positive_only: Some(false),
        batch_size: 3,
        base_history_len: 3,
        ..HimConfig::default()
    }
}

/// A small synthetic log, prepared with every item kept.
pub fn small_synth(users: usize, seed: u64) -> Prepared {
    let spec = SynthSpec {
        users,
        items: 60,
        groups: 3,
        categories_per_group: 2,
        max_positives: 12,
        brands: 3,
        shops: 4,
        seed,
        ..SynthSpec::default()
    };
    let synth = spec.generate().unwrap();
    let cfg = HimConfig {
        min_item_users: 1,
        seed,
        ..HimConfig::default()
    };
    prepare_labeled(synth.interactions, &synth.items, &cfg, true).unwrap()
}

/// Every weight uniform in `[-0.5, 0.5]`, PAD rows of the id tables kept at zero.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let value = store.value_mut(id);
        let cols = value.shape().last().copied().unwrap_or(1);
        value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        let pad = [
            "emb.item",
            "emb.category",
            "emb.brand",
            "emb.shop",
            "emb.price",
        ];
        if pad.contains(&name.as_str()) {
            value.data_mut()[..cols].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
