//! End-to-end scorer: feature assembly, the three model variants, target
//! attention fusion, the scoring MLP and the training objective.

use him_autograd::nn::Mlp;
use him_autograd::{ParamId, ParamStore, Scalar, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HimConfig, Variant};
use crate::data::{Dataset, Feedback, LabeledSample, Vocabulary};
use crate::error::{invalid, Result};
use crate::eval::{length_bucket, Segmenter, LENGTH_BUCKETS};
use crate::reorg::{reorganize, SessionBoundaries};
use crate::ubc::{group_loss, Ubc, UbcDims};
use crate::ubp::{SessionBatch, Ubp, UbpDims, UbpOutput};

/// Probability clamp inside the log loss.
pub const PROB_CLAMP: f64 = 1e-12;
/// Target features: item, category, brand, shop, price bucket.
pub const TARGET_FIELDS: usize = 5;

/// Vocabulary sizes the embedding tables are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSizes {
    pub items: usize,
    pub categories: usize,
    pub brands: usize,
    pub shops: usize,
    pub prices: usize,
}

impl TableSizes {
    pub fn of(data: &Dataset) -> Self {
        Self {
            items: data.items.size(),
            categories: data.categories.size(),
            brands: data.brands.size(),
            shops: data.shops.size(),
            prices: data.prices.size(),
        }
    }
}

/// Fully resolved model shape and objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub sessions: SessionBoundaries,
    pub ubp: UbpDims,
    pub ubc: UbcDims,
    pub tables: TableSizes,
    /// Layer widths including the input width.
    pub mlp_dims: Vec<usize>,
    pub alpha: f64,
    pub group_loss: bool,
    pub stop_grad_pz: bool,
    pub negative_users: usize,
    pub base_history_len: usize,
    pub embedding_init: f64,
    pub segmenter: Segmenter,
}

impl ModelSpec {
    pub fn new(config: &HimConfig, tables: TableSizes, has_real_negatives: bool) -> Result<Self> {
        config.validate()?;
        let t = config.sessions.len();
        let ubp = UbpDims {
            n: config.top_n,
            n_neg: config.top_n_negative,
            d: config.embedding_dim,
            h: config.gru_hidden,
            t,
            positive_only: config.resolved_positive_only(has_real_negatives),
            tie_session_attention: config.tie_session_attention,
        };
        let ubc = UbcDims {
            k: config.groups,
            d_g: config.group_dim,
            d_p: ubp.session_dim(),
            t,
        };
        let d = config.embedding_dim;
        let behavior = match config.variant {
            Variant::Base => d,
            Variant::Ubp => t * ubc.d_p,
            Variant::Him => t * (ubc.d_p + ubc.d_g),
        };
        let input = behavior + TARGET_FIELDS * d + 2 * d;
        let mut mlp_dims = vec![input];
        mlp_dims.extend_from_slice(&config.mlp_dims);
        Ok(Self {
            variant: config.variant,
            sessions: config.sessions.clone(),
            ubp,
            ubc,
            tables,
            mlp_dims,
            alpha: config.resolved_alpha(has_real_negatives),
            group_loss: config.group_loss,
            stop_grad_pz: config.stop_grad_pz,
            negative_users: config.negative_users,
            base_history_len: config.base_history_len,
            embedding_init: config.embedding_init,
            segmenter: Segmenter {
                tailed_below: config.tailed_below,
                head_above: config.head_above,
            },
        })
    }

    pub fn target_dim(&self) -> usize {
        TARGET_FIELDS * self.ubp.d
    }

    /// Whether training batches need drawn negative users.
    pub fn uses_group_loss(&self) -> bool {
        self.variant == Variant::Him && self.group_loss
    }
}

/// Model inputs for a batch of labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub sessions: Option<SessionBatch>,
    pub base_items: Vec<usize>,
    pub base_weights: Vec<f64>,
    /// `[item, category, brand, shop, price]` per sample.
    pub targets: Vec<[usize; TARGET_FIELDS]>,
    /// `[segment, length bucket]` of the history at sample time.
    pub context: Vec<[usize; 2]>,
    pub labels: Vec<u8>,
}

impl Batch {
    /// Builds inputs from each sample's history strictly before its timestamp.
    pub fn build(spec: &ModelSpec, data: &Dataset, samples: &[LabeledSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("batch", "no samples"));
        }
        let l = spec.base_history_len;
        let mut histories = Vec::new();
        let mut batch = Self {
            size: samples.len(),
            sessions: None,
            base_items: Vec::new(),
            base_weights: Vec::new(),
            targets: Vec::with_capacity(samples.len()),
            context: Vec::with_capacity(samples.len()),
            labels: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            if s.user >= data.histories.len() || s.item >= spec.tables.items {
                return Err(invalid(
                    "sample",
                    format!("user {} / item {} outside vocabularies", s.user, s.item),
                ));
            }
            let history = data.history_before(s.user, s.timestamp);
            let positives = history.iter().filter(|e| e.feedback == Feedback::Positive);
            let count = positives.clone().count();
            match spec.variant {
                Variant::Base => {
                    let recent: Vec<usize> = positives.map(|e| e.item).collect();
                    let tail = &recent[recent.len().saturating_sub(l)..];
                    batch.base_items.extend_from_slice(tail);
                    batch
                        .base_weights
                        .extend(std::iter::repeat(1.0).take(tail.len()));
                    batch
                        .base_items
                        .extend(std::iter::repeat(Vocabulary::PAD).take(l - tail.len()));
                    batch
                        .base_weights
                        .extend(std::iter::repeat(0.0).take(l - tail.len()));
                }
                Variant::Ubp | Variant::Him => {
                    histories.push(reorganize(
                        history,
                        &spec.sessions,
                        spec.ubp.n,
                        spec.ubp.n_neg,
                        s.timestamp,
                    )?);
                }
            }
            let meta = data
                .item_meta
                .get(s.item)
                .copied()
                .unwrap_or([Vocabulary::PAD; 4]);
            batch
                .targets
                .push([s.item, meta[0], meta[1], meta[2], meta[3]]);
            batch
                .context
                .push([spec.segmenter.segment(count).index(), length_bucket(count)]);
            batch.labels.push(s.label);
        }
        if spec.variant != Variant::Base {
            batch.sessions = Some(SessionBatch::from_histories(
                &histories,
                spec.ubp.n,
                spec.ubp.n_neg,
            )?);
        }
        Ok(batch)
    }
}

#[derive(Debug, Clone, Copy)]
struct Tables {
    item: ParamId,
    category: ParamId,
    brand: ParamId,
    shop: ParamId,
    price: ParamId,
    segment: ParamId,
    length: ParamId,
}

/// Everything a forward pass leaves on the tape that callers may inspect.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `B x 2` class probabilities; column 1 is the click probability.
    pub probs: Var,
    pub click: Var,
    pub cross_entropy: Var,
    pub group_loss: Option<Var>,
    pub loss: Var,
    pub ubp: Option<UbpOutput>,
    /// Per session, `B x k` group probabilities.
    pub beta: Vec<Var>,
    /// Per session, the hard group of every batch row.
    pub groups: Vec<Vec<usize>>,
    /// `B x 2` fusion weights (personalized, semi-personalized).
    pub fusion: Option<Var>,
}

/// Target attention over the two behavior representations:
/// `s_p = p_z W_p e_t`, `s_c = c_z W_cz e_t`, weights `softmax(s_p, s_c)`.
/// Returns `(e_p, e_c, weights)` with weights `B x 2`.
pub fn fuse<S: Scalar>(
    tape: &mut Tape<S>,
    p_z: Var,
    c_z: Var,
    e_t: Var,
    w_p: Var,
    w_cz: Var,
) -> Result<(Var, Var, Var)> {
    let b = tape.shape(e_t)[0];
    let pw = tape.matmul(p_z, w_p)?;
    let s_p = tape.row_dots(pw, e_t)?;
    let cw = tape.matmul(c_z, w_cz)?;
    let s_c = tape.row_dots(cw, e_t)?;
    let s_p = tape.reshape(s_p, vec![b, 1])?;
    let s_c = tape.reshape(s_c, vec![b, 1])?;
    let scores = tape.hconcat(&[s_p, s_c])?;
    let weights = tape.softmax_rows(scores)?;
    let wp = tape.select_column(weights, 0)?;
    let wc = tape.select_column(weights, 1)?;
    let e_p = tape.mul_rows(p_z, wp)?;
    let e_c = tape.mul_rows(c_z, wc)?;
    Ok((e_p, e_c, weights))
}

/// Mean binary log loss of the click column against `labels`, probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, probs: Var, labels: &[u8]) -> Result<Var> {
    let (lo, hi) = (S::lit(PROB_CLAMP), S::lit(1.0 - PROB_CLAMP));
    let p1 = tape.select_column(probs, 1)?;
    let p0 = tape.select_column(probs, 0)?;
    let l1 = tape.ln_clamped(p1, lo, hi)?;
    let l0 = tape.ln_clamped(p0, lo, hi)?;
    let y1 = tape.constant_vec(
        labels
            .iter()
            .map(|&y| if y == 1 { S::one() } else { S::zero() })
            .collect(),
    )?;
    let y0 = tape.constant_vec(
        labels
            .iter()
            .map(|&y| if y == 1 { S::zero() } else { S::one() })
            .collect(),
    )?;
    let a = tape.mul(l1, y1)?;
    let b = tape.mul(l0, y0)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    Ok(tape.scale(m, -S::one())?)
}

/// `alpha * L_g + L_c`.
pub fn joint_loss<S: Scalar>(tape: &mut Tape<S>, ce: Var, lg: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(invalid("alpha", format!("{alpha}")));
    }
    let weighted = tape.scale(lg, S::lit(alpha))?;
    Ok(tape.add(weighted, ce)?)
}

/// Parameters and structure of one trained or freshly initialized model.
#[derive(Debug, Clone)]
pub struct HimModel<S> {
    pub spec: ModelSpec,
    pub store: ParamStore<S>,
    tables: Tables,
    ubp: Option<Ubp>,
    ubc: Option<Ubc>,
    fusion: Option<(ParamId, ParamId)>,
    mlp: Mlp,
}

impl<S: Scalar> HimModel<S> {
    /// Deterministic initialization from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = spec.ubp.d;
        let init = spec.embedding_init;
        let mut table =
            |store: &mut ParamStore<S>, name: &str, rows: usize, pad: bool| -> Result<ParamId> {
                let id = store.insert_uniform(name, vec![rows.max(1), d], init, &mut rng)?;
                if pad {
                    store.value_mut(id).data_mut()[..d]
                        .iter_mut()
                        .for_each(|v| *v = S::zero());
                    store.freeze_row(id, 0)?;
                }
                Ok(id)
            };
        let tables = Tables {
            item: table(&mut store, "emb.item", spec.tables.items, true)?,
            category: table(&mut store, "emb.category", spec.tables.categories, true)?,
            brand: table(&mut store, "emb.brand", spec.tables.brands, true)?,
            shop: table(&mut store, "emb.shop", spec.tables.shops, true)?,
            price: table(&mut store, "emb.price", spec.tables.prices, true)?,
            segment: table(&mut store, "emb.segment", 3, false)?,
            length: table(&mut store, "emb.length", LENGTH_BUCKETS, false)?,
        };
        let (ubp, ubc, fusion) = match spec.variant {
            Variant::Base => (None, None, None),
            Variant::Ubp => (Some(Ubp::new(&mut store, spec.ubp, &mut rng)?), None, None),
            Variant::Him => {
                let ubp = Ubp::new(&mut store, spec.ubp, &mut rng)?;
                let ubc = Ubc::new(&mut store, spec.ubc, &mut rng)?;
                let t = spec.ubp.t;
                let dt = spec.target_dim();
                let w_p = store.insert_glorot("fusion.w_p", t * spec.ubc.d_p, dt, &mut rng)?;
                let w_cz = store.insert_glorot("fusion.w_cz", t * spec.ubc.d_g, dt, &mut rng)?;
                (Some(ubp), Some(ubc), Some((w_p, w_cz)))
            }
        };
        let mlp = Mlp::new(&mut store, "mlp", &spec.mlp_dims, &mut rng)?;
        Ok(Self {
            spec,
            store,
            tables,
            ubp,
            ubc,
            fusion,
            mlp,
        })
    }

    /// Full forward pass. `negatives` (from [`crate::ubc::draw_negative_users`]) enables the group loss.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        batch: &Batch,
        negatives: Option<&[Vec<usize>]>,
    ) -> Result<Forward> {
        self.forward_with(&self.store, tape, batch, negatives)
    }

    /// [`HimModel::forward`] reading parameter values from `store`, which must share this model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        batch: &Batch,
        negatives: Option<&[Vec<usize>]>,
    ) -> Result<Forward> {
        let b = batch.size;
        let items = tape.param(store, self.tables.item);
        let mut target_parts = Vec::with_capacity(TARGET_FIELDS);
        for (f, table) in [
            self.tables.item,
            self.tables.category,
            self.tables.brand,
            self.tables.shop,
            self.tables.price,
        ]
        .into_iter()
        .enumerate()
        {
            let tv = tape.param(store, table);
            let idx: Vec<usize> = batch.targets.iter().map(|t| t[f]).collect();
            target_parts.push(tape.gather(tv, &idx)?);
        }
        let e_t = tape.hconcat(&target_parts)?;
        let seg = tape.param(store, self.tables.segment);
        let len = tape.param(store, self.tables.length);
        let seg = tape.gather(seg, &batch.context.iter().map(|c| c[0]).collect::<Vec<_>>())?;
        let len = tape.gather(len, &batch.context.iter().map(|c| c[1]).collect::<Vec<_>>())?;

        let mut ubp_out = None;
        let mut beta = Vec::new();
        let mut groups = Vec::new();
        let mut fusion = None;
        let mut lg = None;
        let behavior: Vec<Var> = match self.spec.variant {
            Variant::Base => {
                let l = self.spec.base_history_len;
                let e = tape.gather(items, &batch.base_items)?;
                let w: Vec<S> = batch.base_weights.iter().map(|&x| S::lit(x)).collect();
                let e = tape.scale_rows(e, &w)?;
                vec![tape.group_sum(e, l)?]
            }
            Variant::Ubp | Variant::Him => {
                let sessions = batch
                    .sessions
                    .as_ref()
                    .ok_or_else(|| invalid("batch", "missing session inputs"))?;
                let ubp = self
                    .ubp
                    .as_ref()
                    .expect("pyramid present for session variants");
                let out = ubp.forward(tape, store, items, sessions)?;
                let parts = if let (Some(ubc), Some((w_p, w_cz))) = (&self.ubc, self.fusion) {
                    let t = self.spec.ubp.t;
                    let mut c_z = Vec::with_capacity(t);
                    let mut p_hat = Vec::with_capacity(t);
                    for i in 0..t {
                        let rows: Vec<usize> = (0..b).map(|u| u * t + i).collect();
                        let p_x_i = tape.gather(out.p_x, &rows)?;
                        let enc = ubc.encode(tape, store, i, p_x_i)?;
                        let (labels, cz) = ubc.select(tape, store, i, enc.beta)?;
                        beta.push(enc.beta);
                        groups.push(labels);
                        c_z.push(cz);
                        p_hat.push(enc.p_hat);
                    }
                    if let (true, Some(neg)) = (self.spec.group_loss, negatives) {
                        let targets: Vec<Var> = if self.spec.stop_grad_pz {
                            out.p_z_sessions
                                .iter()
                                .map(|&v| {
                                    let value = tape.value(v).clone();
                                    tape.constant(value)
                                })
                                .collect::<std::result::Result<_, _>>()?
                        } else {
                            out.p_z_sessions.clone()
                        };
                        lg = Some(group_loss(
                            tape,
                            &p_hat,
                            &targets,
                            &sessions.active,
                            neg,
                            self.spec.negative_users,
                        )?);
                    }
                    let c_z = tape.hconcat(&c_z)?;
                    let w_p = tape.param(store, w_p);
                    let w_cz = tape.param(store, w_cz);
                    let (e_p, e_c, w) = fuse(tape, out.p_z, c_z, e_t, w_p, w_cz)?;
                    fusion = Some(w);
                    vec![e_p, e_c]
                } else {
                    vec![out.p_z]
                };
                ubp_out = Some(out);
                parts
            }
        };
        let mut inputs = behavior;
        inputs.extend([e_t, seg, len]);
        let x = tape.hconcat(&inputs)?;
        let logits = self.mlp.forward(tape, store, x)?;
        let probs = tape.softmax_rows(logits)?;
        let click = tape.select_column(probs, 1)?;
        let ce = cross_entropy(tape, probs, &batch.labels)?;
        let loss = match lg {
            Some(lg) => joint_loss(tape, ce, lg, self.spec.alpha)?,
            None => ce,
        };
        Ok(Forward {
            probs,
            click,
            cross_entropy: ce,
            group_loss: lg,
            loss,
            ubp: ubp_out,
            beta,
            groups,
            fusion,
        })
    }

    /// Click probabilities for `samples`, in order, evaluated in chunks.
    pub fn predict(
        &self,
        data: &Dataset,
        samples: &[LabeledSample],
        chunk: usize,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let batch = Batch::build(&self.spec, data, part)?;
            let mut tape = Tape::new();
            let f = self.forward(&mut tape, &batch, None)?;
            out.extend(tape.data(f.click).iter().map(|v| v.to_f64_lossy()));
        }
        Ok(out)
    }

    /// Hard group per session for every sample (empty rows for variants without groups).
    pub fn group_assignments(
        &self,
        data: &Dataset,
        samples: &[LabeledSample],
        chunk: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(samples.len());
        if self.ubc.is_none() {
            out.resize(samples.len(), Vec::new());
            return Ok(out);
        }
        for part in samples.chunks(chunk.max(1)) {
            let batch = Batch::build(&self.spec, data, part)?;
            let mut tape = Tape::new();
            let f = self.forward(&mut tape, &batch, None)?;
            out.extend((0..part.len()).map(|r| f.groups.iter().map(|g| g[r]).collect::<Vec<_>>()));
        }
        Ok(out)
    }
}

pub type HimModel64 = HimModel<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use him_autograd::Tensor;

    #[test]
    fn fusion_weights_are_a_simplex() {
        let mut t = Tape::<f64>::new();
        let p_z = t
            .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let c_z = t
            .constant(Tensor::matrix(2, 1, vec![0.5, 0.0]).unwrap())
            .unwrap();
        let e_t = t
            .constant(Tensor::matrix(2, 2, vec![1.0, -1.0, 0.3, 0.2]).unwrap())
            .unwrap();
        let w_p = t
            .constant(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap())
            .unwrap();
        let w_cz = t
            .constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap())
            .unwrap();
        let (_, _, w) = fuse(&mut t, p_z, c_z, e_t, w_p, w_cz).unwrap();
        // Row 1 has zero behavior vectors, so both scores are 0.
        assert_eq!(&t.data(w)[2..], &[0.5, 0.5]);
        assert!((t.data(w)[0] + t.data(w)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut t = Tape::<f64>::new();
        let half = t
            .constant(Tensor::matrix(2, 2, vec![0.5; 4]).unwrap())
            .unwrap();
        let l = cross_entropy(&mut t, half, &[1, 0]).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let exact = t
            .constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let l = cross_entropy(&mut t, exact, &[1, 0]).unwrap();
        assert!(t.scalar(l) < 1e-10);
    }

    #[test]
    fn joint_loss_arithmetic() {
        let mut t = Tape::<f64>::new();
        let ce = t.constant(Tensor::scalar(3.0)).unwrap();
        let lg = t.constant(Tensor::scalar(2.0)).unwrap();
        let l = joint_loss(&mut t, ce, lg, 1.0).unwrap();
        assert_eq!(t.scalar(l), 5.0);
        let l = joint_loss(&mut t, ce, lg, 0.0).unwrap();
        assert_eq!(t.scalar(l).to_bits(), 3f64.to_bits());
        assert!(joint_loss(&mut t, ce, lg, -1.0).is_err());
    }
}
