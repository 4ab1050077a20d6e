//! Personalized interest pyramid: frequency scaling, negative pooling,
//! distance attention, a frequency-ordered GRU per session and attention
//! across sessions.
//!
//! Everything runs batched: a batch of `B` users with `T` sessions is laid
//! out as `R = B * T` session rows ordered `(user, session)`, and each session
//! row owns `n` consecutive item rows.

use him_autograd::nn::GruCell;
use him_autograd::{ParamId, ParamStore, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::reorg::SessionizedHistory;

/// Shape of the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UbpDims {
    pub n: usize,
    pub n_neg: usize,
    pub d: usize,
    pub h: usize,
    pub t: usize,
    pub positive_only: bool,
    pub tie_session_attention: bool,
}

impl UbpDims {
    /// `d_p = n * h + d`.
    pub fn session_dim(&self) -> usize {
        self.n * self.h + self.d
    }
}

/// Flattened reorganized histories for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionBatch {
    pub users: usize,
    pub sessions: usize,
    pub n: usize,
    pub n_neg: usize,
    pub pos_items: Vec<usize>,
    pub pos_freqs: Vec<f64>,
    pub pos_mask: Vec<bool>,
    pub neg_items: Vec<usize>,
    pub neg_freqs: Vec<f64>,
    /// One flag per session row: at least one positive item.
    pub active: Vec<bool>,
}

impl SessionBatch {
    pub fn from_histories(
        histories: &[SessionizedHistory],
        n: usize,
        n_neg: usize,
    ) -> Result<Self> {
        let sessions = histories.first().map_or(0, |h| h.sessions());
        let rows = histories.len() * sessions;
        let mut b = Self {
            users: histories.len(),
            sessions,
            n,
            n_neg,
            pos_items: Vec::with_capacity(rows * n),
            pos_freqs: Vec::with_capacity(rows * n),
            pos_mask: Vec::with_capacity(rows * n),
            neg_items: Vec::with_capacity(rows * n_neg),
            neg_freqs: Vec::with_capacity(rows * n_neg),
            active: Vec::with_capacity(rows),
        };
        for h in histories {
            if h.sessions() != sessions {
                return Err(invalid("batch", "histories disagree on session count"));
            }
            for i in 0..sessions {
                let (p, q) = (&h.positive[i], &h.negative[i]);
                if p.items.len() != n || q.items.len() != n_neg {
                    return Err(invalid(
                        "batch",
                        "ranked feedback length differs from configuration",
                    ));
                }
                b.pos_items.extend_from_slice(&p.items);
                b.pos_freqs.extend(p.freqs.iter().map(|&f| f as f64));
                b.pos_mask.extend_from_slice(&p.mask);
                b.neg_items.extend_from_slice(&q.items);
                b.neg_freqs.extend(q.freqs.iter().map(|&f| f as f64));
                b.active.push(h.active(i));
            }
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.users * self.sessions
    }
}

fn lits<S: Scalar>(xs: &[f64]) -> Vec<S> {
    xs.iter().map(|&x| S::lit(x)).collect()
}

fn flags<S: Scalar>(xs: &[bool]) -> Vec<S> {
    xs.iter()
        .map(|&x| if x { S::one() } else { S::zero() })
        .collect()
}

/// Row `j` multiplied by its frequency; padded rows (frequency 0) vanish.
pub fn frequency_scale<S: Scalar>(tape: &mut Tape<S>, e: Var, freqs: &[f64]) -> Result<Var> {
    if freqs.iter().any(|f| *f < 0.0) {
        return Err(invalid("frequency", "negative frequency"));
    }
    Ok(tape.scale_rows(e, &lits(freqs))?)
}

/// Frequency-weighted sum of each run of `n` negative rows: `(R*n) x d -> R x d`.
pub fn pool_negative<S: Scalar>(
    tape: &mut Tape<S>,
    e_neg: Var,
    freqs: &[f64],
    n: usize,
) -> Result<Var> {
    let scaled = frequency_scale(tape, e_neg, freqs)?;
    Ok(tape.group_sum(scaled, n)?)
}

/// Distances from each scaled positive row to its session's pooled negative,
/// and their softmax within each session over unmasked positives.
/// Returns `(distances, weights)`, both of length `R*n`.
pub fn distance_attention<S: Scalar>(
    tape: &mut Tape<S>,
    e_pos_scaled: Var,
    e_neg_pooled: Var,
    n: usize,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let rep = tape.repeat_rows(e_neg_pooled, n)?;
    let diff = tape.sub(e_pos_scaled, rep)?;
    let dist = tape.row_norms(diff)?;
    let alpha = tape.softmax_groups(dist, n, mask)?;
    Ok((dist, alpha))
}

/// Learned pieces of the pyramid. The item table lives with the model so it can be shared.
#[derive(Debug, Clone)]
pub struct Ubp {
    pub dims: UbpDims,
    gru: GruCell,
    attention: Vec<ParamId>,
}

/// Forward products for one batch.
#[derive(Debug, Clone)]
pub struct UbpOutput {
    /// `R x d_p` session representations before cross-session attention.
    pub p_x: Var,
    /// Per target session, `B x d_p`.
    pub p_z_sessions: Vec<Var>,
    /// `B x (T * d_p)`, sessions side by side.
    pub p_z: Var,
    /// Item-to-negative distances and their attention weights (`R*n`); absent when positive-only.
    pub distances: Option<Var>,
    pub item_attention: Option<Var>,
    /// Per target session, weights over the `T` source sessions of every user (`B*T`).
    pub session_attention: Vec<Var>,
}

impl Ubp {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        dims: UbpDims,
        rng: &mut R,
    ) -> Result<Self> {
        let gru = GruCell::new(store, "ubp.gru", dims.d, dims.h, rng)?;
        let dp = dims.session_dim();
        let count = if dims.tie_session_attention {
            1
        } else {
            dims.t
        };
        let attention = (0..count)
            .map(|i| store.insert_glorot(format!("ubp.attn.{i}"), dp, dp, rng))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            dims,
            gru,
            attention,
        })
    }

    fn attention_for(&self, session: usize) -> ParamId {
        self.attention[if self.dims.tie_session_attention {
            0
        } else {
            session
        }]
    }

    /// Per-session encoding: scaled (and, with negatives, attention-weighted)
    /// positives run through the GRU in rank order; all `n` hidden states are
    /// kept, followed by the pooled negative. Inactive sessions give zero rows.
    pub fn encode_sessions<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        items: Var,
        batch: &SessionBatch,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        let UbpDims { n, d, h, .. } = self.dims;
        let rows = batch.rows();
        let e_pos = tape.gather(items, &batch.pos_items)?;
        let scaled = frequency_scale(tape, e_pos, &batch.pos_freqs)?;
        let (weighted, neg_slot, dist, alpha) = if self.dims.positive_only {
            (scaled, tape.zeros(vec![rows, d])?, None, None)
        } else {
            let e_neg = tape.gather(items, &batch.neg_items)?;
            let pooled = pool_negative(tape, e_neg, &batch.neg_freqs, batch.n_neg)?;
            let (dist, alpha) = distance_attention(tape, scaled, pooled, n, &batch.pos_mask)?;
            let weighted = tape.mul_rows(scaled, alpha)?;
            (weighted, pooled, Some(dist), Some(alpha))
        };

        let mut state = tape.zeros(vec![rows, h])?;
        let mut parts = Vec::with_capacity(n + 1);
        for j in 0..n {
            let idx: Vec<usize> = (0..rows).map(|r| r * n + j).collect();
            let x = tape.gather(weighted, &idx)?;
            state = self.gru.step_rows(tape, store, x, state)?;
            let step_mask: Vec<bool> = idx.iter().map(|&k| batch.pos_mask[k]).collect();
            parts.push(tape.scale_rows(state, &flags(&step_mask))?);
        }
        parts.push(neg_slot);
        let joined = tape.hconcat(&parts)?;
        let p_x = tape.scale_rows(joined, &flags(&batch.active))?;
        Ok((p_x, dist, alpha))
    }

    /// For target session `i`: `p_z^i = sum_t a_t (W^i p_x^t)` with
    /// `a = softmax_t(<W^i p_x^i, W^i p_x^t> / sqrt(d_p))` over active sessions.
    pub fn session_attention<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        p_x: Var,
        batch: &SessionBatch,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let t = batch.sessions;
        let inv = S::one() / S::from_usize(self.dims.session_dim()).unwrap().sqrt();
        let mut p_z = Vec::with_capacity(t);
        let mut weights = Vec::with_capacity(t);
        for i in 0..t {
            let w = tape.param(store, self.attention_for(i));
            let proj = tape.matmul_nt(p_x, w)?;
            let query_rows: Vec<usize> = (0..batch.users).map(|b| b * t + i).collect();
            let q = tape.gather(proj, &query_rows)?;
            let q = tape.repeat_rows(q, t)?;
            let scores = tape.row_dots(proj, q)?;
            let scores = tape.scale(scores, inv)?;
            let a = tape.softmax_groups(scores, t, &batch.active)?;
            let mixed = tape.mul_rows(proj, a)?;
            p_z.push(tape.group_sum(mixed, t)?);
            weights.push(a);
        }
        Ok((p_z, weights))
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        items: Var,
        batch: &SessionBatch,
    ) -> Result<UbpOutput> {
        if batch.sessions != self.dims.t || batch.n != self.dims.n || batch.n_neg != self.dims.n_neg
        {
            return Err(invalid("batch", "session layout differs from the model"));
        }
        let (p_x, distances, item_attention) = self.encode_sessions(tape, store, items, batch)?;
        let (p_z_sessions, session_attention) = self.session_attention(tape, store, p_x, batch)?;
        let p_z = tape.hconcat(&p_z_sessions)?;
        Ok(UbpOutput {
            p_x,
            p_z_sessions,
            p_z,
            distances,
            item_attention,
            session_attention,
        })
    }
}

/// Mean item-to-negative distance over the unmasked positives of each session row;
/// `None` for rows without positives.
pub fn mean_session_distances(distances: &[f64], mask: &[bool], n: usize) -> Vec<Option<f64>> {
    distances
        .chunks(n)
        .zip(mask.chunks(n))
        .map(|(d, m)| {
            let (sum, count) = d
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
            (count > 0).then(|| sum / count as f64)
        })
        .collect()
}
