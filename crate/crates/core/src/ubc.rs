//! Semi-personalized interest: a per-session autoencoder whose bottleneck is
//! a distribution over `k` learnable group embeddings, hard group selection,
//! and the contrastive max-margin loss that trains it.

use him_autograd::{ParamId, ParamStore, Scalar, Tape, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const GROUP_INIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UbcDims {
    /// Group count k.
    pub k: usize,
    /// Group embedding width.
    pub d_g: usize,
    /// Session representation width (input and reconstruction).
    pub d_p: usize,
    pub t: usize,
}

#[derive(Debug, Clone, Copy)]
struct SessionParams {
    g: ParamId,
    w_c: ParamId,
    b_c: ParamId,
    w_r: ParamId,
    b_r: ParamId,
}

#[derive(Debug, Clone)]
pub struct Ubc {
    pub dims: UbcDims,
    sessions: Vec<SessionParams>,
}

/// Autoencoder products for one session over a batch.
#[derive(Debug, Clone, Copy)]
pub struct GroupEncoding {
    /// `B x k` group probabilities.
    pub beta: Var,
    /// `B x d_g` soft group mixture.
    pub mu: Var,
    /// `B x d_p` reconstruction.
    pub p_hat: Var,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Ubc {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        dims: UbcDims,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sessions = Vec::with_capacity(dims.t);
        for i in 0..dims.t {
            sessions.push(SessionParams {
                g: store.insert_uniform(
                    format!("ubc.{i}.g"),
                    vec![dims.k, dims.d_g],
                    GROUP_INIT,
                    rng,
                )?,
                w_c: store.insert_glorot(format!("ubc.{i}.w_c"), dims.k, dims.d_p, rng)?,
                b_c: store.insert_zeros(format!("ubc.{i}.b_c"), vec![dims.k])?,
                w_r: store.insert_glorot(format!("ubc.{i}.w_r"), dims.d_p, dims.d_g, rng)?,
                b_r: store.insert_zeros(format!("ubc.{i}.b_r"), vec![dims.d_p])?,
            });
        }
        Ok(Self { dims, sessions })
    }

    /// `beta = softmax(W_c p_x + b_c)`, `mu = beta^T G`, `p_hat = sigmoid(W_r mu + b_r)`, row-wise.
    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        session: usize,
        p_x: Var,
    ) -> Result<GroupEncoding> {
        let sp = self.sessions[session];
        let (g, w_c, b_c) = (
            tape.param(store, sp.g),
            tape.param(store, sp.w_c),
            tape.param(store, sp.b_c),
        );
        let (w_r, b_r) = (tape.param(store, sp.w_r), tape.param(store, sp.b_r));
        let logits = tape.matmul_nt(p_x, w_c)?;
        let logits = tape.add_row_broadcast(logits, b_c)?;
        let beta = tape.softmax_rows(logits)?;
        let mu = tape.matmul(beta, g)?;
        let rec = tape.matmul_nt(mu, w_r)?;
        let rec = tape.add_row_broadcast(rec, b_r)?;
        let p_hat = tape.sigmoid(rec)?;
        Ok(GroupEncoding { beta, mu, p_hat })
    }

    /// Hard group per row and the selected group embeddings (`B x d_g`).
    /// Gradient reaches only the selected rows of `G`.
    pub fn select<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        session: usize,
        beta: Var,
    ) -> Result<(Vec<usize>, Var)> {
        let k = self.dims.k;
        let labels: Vec<usize> = tape.data(beta).chunks(k).map(argmax).collect();
        let g = tape.param(store, self.sessions[session].g);
        let c_z = tape.gather(g, &labels)?;
        Ok((labels, c_z))
    }
}

/// For every session and batch row, `p` distinct other rows of the batch.
/// Layout: `out[session][row * p + j]`.
pub fn draw_negative_users<R: Rng + ?Sized>(
    rng: &mut R,
    batch: usize,
    sessions: usize,
    p: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch < p + 1 {
        return Err(invalid(
            "group loss",
            format!("batch of {batch} cannot supply {p} negatives"),
        ));
    }
    let mut out = Vec::with_capacity(sessions);
    for _ in 0..sessions {
        let mut v = Vec::with_capacity(batch * p);
        for b in 0..batch {
            v.extend(
                sample(rng, batch - 1, p)
                    .into_iter()
                    .map(|j| if j >= b { j + 1 } else { j }),
            );
        }
        out.push(v);
    }
    Ok(out)
}

/// Hinge loss `sum_i sum_j max(0, 1 - <p_hat^i, p_z^i> + <p_hat^i, p_hat^{i,j}>)`
/// over unit-normalized rows, summed over anchor sessions flagged in
/// `anchor` (`B*T`, user-major) and averaged over the batch.
pub fn group_loss<S: Scalar>(
    tape: &mut Tape<S>,
    p_hat: &[Var],
    p_z: &[Var],
    anchor: &[bool],
    negatives: &[Vec<usize>],
    p: usize,
) -> Result<Var> {
    let t = p_hat.len();
    if p_z.len() != t || negatives.len() != t {
        return Err(invalid("group loss", "session counts differ"));
    }
    let b = tape.shape(p_hat[0])[0];
    if anchor.len() != b * t {
        return Err(invalid("group loss", "anchor mask length"));
    }
    let mut terms = Vec::with_capacity(t);
    for i in 0..t {
        let hat = tape.normalize_rows(p_hat[i])?;
        let z = tape.normalize_rows(p_z[i])?;
        let pos = tape.row_dots(hat, z)?;
        let pos = tape.reshape(pos, vec![b, 1])?;
        let pos = tape.repeat_rows(pos, p)?;
        let pos = tape.reshape(pos, vec![b * p])?;
        let others = tape.gather(hat, &negatives[i])?;
        let me = tape.repeat_rows(hat, p)?;
        let neg = tape.row_dots(me, others)?;
        let margin = tape.sub(neg, pos)?;
        let margin = tape.affine(margin, S::one(), S::one())?;
        let hinge = tape.relu(margin)?;
        let weights: Vec<S> = (0..b * p)
            .map(|r| {
                if anchor[(r / p) * t + i] {
                    S::one()
                } else {
                    S::zero()
                }
            })
            .collect();
        let w = tape.constant_vec(weights)?;
        let masked = tape.mul(hinge, w)?;
        terms.push(tape.sum(masked)?);
    }
    let total = tape.concat(&terms)?;
    let total = tape.sum(total)?;
    Ok(tape.scale(total, S::one() / S::from_usize(b).unwrap())?)
}
