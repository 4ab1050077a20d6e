//! Learnable parameters, their gradients and Adam moment estimates.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AutogradError, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param<S> {
    name: String,
    value: Tensor<S>,
    grad: Vec<S>,
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
    /// Rows of a matrix parameter that the optimizer never touches (PAD rows).
    frozen_rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named collection of learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, ParamId>,
    grads_ready: bool,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            grads_ready: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutogradError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let len = value.len();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: vec![S::zero(); len],
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            step: 0,
            frozen_rows: Vec::new(),
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    /// Uniform(-bound, bound) initialization.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| S::lit(rng.gen_range(-bound..=bound)))
            .collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    /// Glorot-uniform initialization for an `out x in` matrix.
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.insert_uniform(name, vec![rows, cols], bound, rng)
    }

    /// Excludes `row` of a matrix parameter from optimizer updates.
    pub fn freeze_row(&mut self, id: ParamId, row: usize) -> Result<()> {
        let param = self.param_mut(id)?;
        let (rows, _) = param.value.dims2("freeze_row")?;
        if row >= rows {
            return Err(invalid("freeze_row", format!("row {row} out of {rows}")));
        }
        if !param.frozen_rows.contains(&row) {
            param.frozen_rows.push(row);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.params[id.0].grad
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn param_mut(&mut self, id: ParamId) -> Result<&mut Param<S>> {
        self.params
            .get_mut(id.0)
            .ok_or_else(|| AutogradError::UnknownParam(format!("#{}", id.0)))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
        self.grads_ready = false;
    }

    /// Adds the gradients recorded on `tape` (after `backward`) into the store.
    /// Parameters the tape never touched keep a zero gradient.
    pub fn accumulate(&mut self, tape: &Tape<S>) -> Result<()> {
        for (id, var) in tape.bindings() {
            let Some(grad) = tape.grad(var) else { continue };
            let param = self.param_mut(id)?;
            if grad.len() != param.grad.len() {
                return Err(AutogradError::ShapeMismatch {
                    op: "accumulate",
                    lhs: vec![grad.len()],
                    rhs: vec![param.grad.len()],
                });
            }
            for (acc, g) in param.grad.iter_mut().zip(grad) {
                *acc += *g;
            }
        }
        self.grads_ready = true;
        Ok(())
    }

    pub fn grad_norm(&self) -> S {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| *g * *g)
            .sum::<S>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: S) -> S {
        let norm = self.grad_norm();
        if norm > max_norm && norm > S::zero() {
            let scale = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    /// One bias-corrected Adam update of every parameter, then zeroes the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grads_ready {
            return Err(AutogradError::MissingGrad);
        }
        let lr = S::lit(cfg.lr);
        let b1 = S::lit(cfg.beta1);
        let b2 = S::lit(cfg.beta2);
        let eps = S::lit(cfg.eps);
        let one = S::one();
        for p in &mut self.params {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let cols = match p.value.shape() {
                [_, c] => *c,
                _ => 0,
            };
            let values = p.value.data_mut();
            for i in 0..values.len() {
                if cols > 0 && p.frozen_rows.contains(&(i / cols)) {
                    continue;
                }
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
        self.grads_ready = false;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    StoredTensor {
                        shape: p.value.shape().to_vec(),
                        values: p.value.to_f64_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: Checkpoint::VERSION,
            params,
        }
    }

    /// Overwrites values from `ckpt`. Every parameter must be present with the same shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.version != Checkpoint::VERSION {
            return Err(AutogradError::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        if ckpt.params.len() != self.params.len() {
            return Err(AutogradError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                ckpt.params.len()
            )));
        }
        for p in &mut self.params {
            let stored = ckpt
                .params
                .get(&p.name)
                .ok_or_else(|| AutogradError::Checkpoint(format!("missing `{}`", p.name)))?;
            if stored.shape != p.value.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "load_checkpoint",
                    lhs: stored.shape.clone(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            p.value = Tensor::from_f64(stored.shape.clone(), &stored.values)?;
        }
        Ok(())
    }

    /// Builds a store holding exactly the checkpointed tensors (no frozen rows, fresh moments).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut store = Self::new();
        for (name, stored) in &ckpt.params {
            store.insert(
                name.clone(),
                Tensor::from_f64(stored.shape.clone(), &stored.values)?,
            )?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Serialized parameter values, `name -> (shape, values)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| AutogradError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AutogradError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| AutogradError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AutogradError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
