//! Layers assembled from tape primitives.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_h: ParamId,
    u_h: ParamId,
    b_h: ParamId,
}

impl GruCell {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut gate = |g: &str| -> Result<(ParamId, ParamId, ParamId)> {
            Ok((
                store.insert_glorot(format!("{prefix}.w_{g}"), hidden, input, rng)?,
                store.insert_glorot(format!("{prefix}.u_{g}"), hidden, hidden, rng)?,
                store.insert_zeros(format!("{prefix}.b_{g}"), vec![hidden])?,
            ))
        };
        let (w_z, u_z, b_z) = gate("z")?;
        let (w_r, u_r, b_r) = gate("r")?;
        let (w_h, u_h, b_h) = gate("h")?;
        Ok(Self {
            input,
            hidden,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        })
    }

    fn affine2<S: Scalar>(
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        (w, u, b): (ParamId, ParamId, ParamId),
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let (w, u, b) = (
            tape.param(store, w),
            tape.param(store, u),
            tape.param(store, b),
        );
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    }

    pub fn step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let z = Self::affine2(tape, store, (self.w_z, self.u_z, self.b_z), x, h)?;
        let z = tape.sigmoid(z)?;
        let r = Self::affine2(tape, store, (self.w_r, self.u_r, self.b_r), x, h)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let cand = Self::affine2(tape, store, (self.w_h, self.u_h, self.b_h), x, rh)?;
        let cand = tape.tanh(cand)?;
        let delta = tape.sub(cand, h)?;
        let delta = tape.mul(z, delta)?;
        tape.add(h, delta)
    }

    fn affine2_rows<S: Scalar>(
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        (w, u, b): (ParamId, ParamId, ParamId),
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let (w, u, b) = (
            tape.param(store, w),
            tape.param(store, u),
            tape.param(store, b),
        );
        let wx = tape.matmul_nt(x, w)?;
        let uh = tape.matmul_nt(h, u)?;
        let s = tape.add(wx, uh)?;
        tape.add_row_broadcast(s, b)
    }

    /// The same update applied to every row: `x` is `batch x input`, `h` is `batch x hidden`.
    pub fn step_rows<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let z = Self::affine2_rows(tape, store, (self.w_z, self.u_z, self.b_z), x, h)?;
        let z = tape.sigmoid(z)?;
        let r = Self::affine2_rows(tape, store, (self.w_r, self.u_r, self.b_r), x, h)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let cand = Self::affine2_rows(tape, store, (self.w_h, self.u_h, self.b_h), x, rh)?;
        let cand = tape.tanh(cand)?;
        let delta = tape.sub(cand, h)?;
        let delta = tape.mul(z, delta)?;
        tape.add(h, delta)
    }
}

/// Fully connected stack over a batch matrix: tanh between layers, linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub dims: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `dims[0]` is the input width; each further entry adds a layer.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.len().saturating_sub(1));
        for (i, pair) in dims.windows(2).enumerate() {
            let w = store.insert_glorot(format!("{prefix}.{i}.w"), pair[0], pair[1], rng)?;
            let b = store.insert_zeros(format!("{prefix}.{i}.b"), vec![pair[1]])?;
            layers.push((w, b));
        }
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    /// `x` is `batch x dims[0]`; returns `batch x dims.last()`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            let lin = tape.matmul(h, w)?;
            h = tape.add_row_broadcast(lin, b)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}
