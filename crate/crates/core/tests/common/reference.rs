//! Straight-line f64 re-implementation of the scorer, one sample and one
//! session at a time, reading weights by name. Used as an oracle for the
//! batched tape implementation.

use him_autograd::ParamStore;
use him_core::config::Variant;
use him_core::data::{Dataset, Feedback, LabeledSample, Vocabulary};
use him_core::eval::length_bucket;
use him_core::model::{ModelSpec, PROB_CLAMP};
use him_core::reorg::reorganize;

pub struct Weights<'a>(pub &'a ParamStore<f64>);

impl Weights<'_> {
    fn get(&self, name: &str) -> (&[usize], &[f64]) {
        let v = self.0.value(self.0.id(name).unwrap());
        (v.shape(), v.data())
    }

    fn row(&self, name: &str, r: usize) -> Vec<f64> {
        let (shape, data) = self.get(name);
        let c = shape[1];
        data[r * c..(r + 1) * c].to_vec()
    }

    /// `W x` with `W` stored `out x in`.
    fn apply(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (shape, data) = self.get(name);
        assert_eq!(shape[1], x.len(), "{name}");
        (0..shape[0])
            .map(|o| dot(&data[o * shape[1]..(o + 1) * shape[1]], x))
            .collect()
    }

    /// `x W` with `W` stored `in x out`.
    fn apply_t(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (shape, data) = self.get(name);
        assert_eq!(shape[0], x.len(), "{name}");
        (0..shape[1])
            .map(|o| (0..shape[0]).map(|i| x[i] * data[i * shape[1] + o]).sum())
            .collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.get(name).1.to_vec()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax over the entries with `keep`; the rest (or all, if none kept) get 0.
pub fn masked_softmax(x: &[f64], keep: &[bool]) -> Vec<f64> {
    let m = x
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; x.len()];
    }
    let e: Vec<f64> = x
        .iter()
        .zip(keep)
        .map(|(v, k)| if *k { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let n = dot(x, x).sqrt().max(him_autograd::NORM_FLOOR);
    x.iter().map(|v| v / n).collect()
}

fn gru(w: &Weights, x: &[f64], h: &[f64]) -> Vec<f64> {
    let gate = |g: &str, h_in: &[f64]| {
        add(
            &add(
                &w.apply(&format!("ubp.gru.w_{g}"), x),
                &w.apply(&format!("ubp.gru.u_{g}"), h_in),
            ),
            &w.vec(&format!("ubp.gru.b_{g}")),
        )
    };
    let z: Vec<f64> = gate("z", h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate("r", h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = gate("h", &rh).into_iter().map(f64::tanh).collect();
    (0..h.len())
        .map(|i| h[i] + z[i] * (cand[i] - h[i]))
        .collect()
}

/// Everything the reference computes for one sample.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub click: f64,
    pub p_x: Vec<Vec<f64>>,
    pub p_z: Vec<Vec<f64>>,
    pub p_hat: Vec<Vec<f64>>,
    pub active: Vec<bool>,
    pub item_attention: Vec<Vec<f64>>,
    pub session_attention: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub groups: Vec<usize>,
    pub fusion: Option<[f64; 2]>,
}

pub fn sample_trace(
    spec: &ModelSpec,
    w: &Weights,
    data: &Dataset,
    s: &LabeledSample,
) -> SampleTrace {
    let d = spec.ubp.d;
    let emb = |table: &str, r: usize| w.row(table, r);
    let history = data.history_before(s.user, s.timestamp);
    let positives: Vec<usize> = history
        .iter()
        .filter(|e| e.feedback == Feedback::Positive)
        .map(|e| e.item)
        .collect();
    let meta = data
        .item_meta
        .get(s.item)
        .copied()
        .unwrap_or([Vocabulary::PAD; 4]);
    let mut e_t = emb("emb.item", s.item);
    for (table, idx) in ["emb.category", "emb.brand", "emb.shop", "emb.price"]
        .iter()
        .zip(meta)
    {
        e_t.extend(emb(table, idx));
    }
    let seg = emb(
        "emb.segment",
        spec.segmenter.segment(positives.len()).index(),
    );
    let len = emb("emb.length", length_bucket(positives.len()));

    let mut trace = SampleTrace {
        click: 0.0,
        p_x: vec![],
        p_z: vec![],
        p_hat: vec![],
        active: vec![],
        item_attention: vec![],
        session_attention: vec![],
        beta: vec![],
        groups: vec![],
        fusion: None,
    };
    let mut x = Vec::new();
    if spec.variant == Variant::Base {
        let tail = &positives[positives.len().saturating_sub(spec.base_history_len)..];
        let mut pooled = vec![0.0; d];
        for &i in tail {
            pooled = add(&pooled, &emb("emb.item", i));
        }
        x.extend(pooled);
    } else {
        let n = spec.ubp.n;
        let t = spec.ubp.t;
        let hist = reorganize(history, &spec.sessions, n, spec.ubp.n_neg, s.timestamp).unwrap();
        for i in 0..t {
            let (pos, neg) = (&hist.positive[i], &hist.negative[i]);
            let scaled: Vec<Vec<f64>> = (0..n)
                .map(|j| {
                    emb("emb.item", pos.items[j])
                        .iter()
                        .map(|v| v * pos.freqs[j] as f64)
                        .collect()
                })
                .collect();
            let mut pooled = vec![0.0; d];
            for (item, f) in neg.items.iter().zip(&neg.freqs) {
                pooled = add(
                    &pooled,
                    &emb("emb.item", *item)
                        .iter()
                        .map(|v| v * *f as f64)
                        .collect::<Vec<_>>(),
                );
            }
            let (inputs, slot, attn) = if spec.ubp.positive_only {
                (scaled.clone(), vec![0.0; d], vec![])
            } else {
                let dist: Vec<f64> = scaled
                    .iter()
                    .map(|e| {
                        e.iter()
                            .zip(&pooled)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                let a = masked_softmax(&dist, &pos.mask);
                let inputs = scaled
                    .iter()
                    .zip(&a)
                    .map(|(e, w)| e.iter().map(|v| v * w).collect())
                    .collect();
                (inputs, pooled.clone(), a)
            };
            let mut h = vec![0.0; spec.ubp.h];
            let mut p = Vec::new();
            for j in 0..n {
                h = gru(w, &inputs[j], &h);
                if pos.mask[j] {
                    p.extend(&h);
                } else {
                    p.extend(vec![0.0; h.len()]);
                }
            }
            p.extend(slot);
            let active = hist.active(i);
            if !active {
                p.iter_mut().for_each(|v| *v = 0.0);
            }
            trace.p_x.push(p);
            trace.active.push(active);
            trace.item_attention.push(attn);
        }
        let dp = spec.ubc.d_p as f64;
        for i in 0..t {
            let name = if spec.ubp.tie_session_attention {
                "ubp.attn.0".to_string()
            } else {
                format!("ubp.attn.{i}")
            };
            let proj: Vec<Vec<f64>> = trace.p_x.iter().map(|p| w.apply(&name, p)).collect();
            let scores: Vec<f64> = proj.iter().map(|q| dot(&proj[i], q) / dp.sqrt()).collect();
            let a = masked_softmax(&scores, &trace.active);
            let mut z = vec![0.0; proj[0].len()];
            for (q, wt) in proj.iter().zip(&a) {
                z = add(&z, &q.iter().map(|v| v * wt).collect::<Vec<_>>());
            }
            trace.p_z.push(z);
            trace.session_attention.push(a);
        }
        let p_z: Vec<f64> = trace.p_z.concat();
        if spec.variant == Variant::Ubp {
            x.extend(p_z);
        } else {
            let mut c_z = Vec::new();
            for i in 0..t {
                let logits = add(
                    &w.apply(&format!("ubc.{i}.w_c"), &trace.p_x[i]),
                    &w.vec(&format!("ubc.{i}.b_c")),
                );
                let beta = masked_softmax(&logits, &vec![true; logits.len()]);
                let mu = w.apply_t(&format!("ubc.{i}.g"), &beta);
                let rec = add(
                    &w.apply(&format!("ubc.{i}.w_r"), &mu),
                    &w.vec(&format!("ubc.{i}.b_r")),
                );
                trace.p_hat.push(rec.into_iter().map(sigmoid).collect());
                let g = him_core::ubc::argmax(&beta);
                c_z.extend(w.row(&format!("ubc.{i}.g"), g));
                trace.groups.push(g);
                trace.beta.push(beta);
            }
            let s_p = dot(&w.apply_t("fusion.w_p", &p_z), &e_t);
            let s_c = dot(&w.apply_t("fusion.w_cz", &c_z), &e_t);
            let f = masked_softmax(&[s_p, s_c], &[true, true]);
            x.extend(p_z.iter().map(|v| v * f[0]));
            x.extend(c_z.iter().map(|v| v * f[1]));
            trace.fusion = Some([f[0], f[1]]);
        }
    }
    x.extend(e_t);
    x.extend(seg);
    x.extend(len);
    let layers = spec.mlp_dims.len() - 1;
    for l in 0..layers {
        x = add(
            &w.apply_t(&format!("mlp.{l}.w"), &x),
            &w.vec(&format!("mlp.{l}.b")),
        );
        if l + 1 < layers {
            x.iter_mut().for_each(|v| *v = v.tanh());
        }
    }
    trace.click = masked_softmax(&x, &[true, true])[1];
    trace
}

/// Mean clamped log loss of the reference clicks.
pub fn cross_entropy(traces: &[SampleTrace], samples: &[LabeledSample]) -> f64 {
    let total: f64 = traces
        .iter()
        .zip(samples)
        .map(|(t, s)| {
            let p = if s.label == 1 { t.click } else { 1.0 - t.click };
            -p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
        })
        .sum();
    total / samples.len() as f64
}

/// Hinge group loss by explicit loops over anchor users, sessions and drawn negatives.
pub fn group_loss(traces: &[SampleTrace], negatives: &[Vec<usize>], p: usize) -> f64 {
    let b = traces.len();
    let t = traces[0].p_hat.len();
    let mut total = 0.0;
    for u in 0..b {
        for i in 0..t {
            if !traces[u].active[i] {
                continue;
            }
            let hat = normalize(&traces[u].p_hat[i]);
            let z = normalize(&traces[u].p_z[i]);
            for j in 0..p {
                let other = normalize(&traces[negatives[i][u * p + j]].p_hat[i]);
                total += (1.0 - dot(&hat, &z) + dot(&hat, &other)).max(0.0);
            }
        }
    }
    total / b as f64
}
