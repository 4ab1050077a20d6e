//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to verify.

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a - b| / max(|a|, |b|)`; zero when both are zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Tape gradients of `loss` for every parameter in `store`.
pub fn analytic_gradients<S, F>(store: &mut ParamStore<S>, mut loss: F) -> Result<Vec<Vec<S>>>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>, &mut Tape<S>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(store, &mut tape)?;
    tape.backward(l)?;
    store.zero_grad();
    store.accumulate(&tape)?;
    let grads = store.ids().map(|id| store.grad(id).to_vec()).collect();
    store.zero_grad();
    Ok(grads)
}

/// `(f(w + step) - f(w - step)) / (2 step)` for every weight, one at a time.
pub fn numeric_gradients<S, F>(
    store: &mut ParamStore<S>,
    step: f64,
    mut loss: F,
) -> Result<Vec<Vec<S>>>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>, &mut Tape<S>) -> Result<Var>,
{
    let h = S::lit(step);
    let mut eval = |store: &ParamStore<S>| -> Result<S> {
        let mut tape = Tape::new();
        let l = loss(store, &mut tape)?;
        Ok(tape.scalar(l))
    };
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            g.push((plus - minus) / (h + h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares tape gradients with central differences for every weight.
/// Entries where both magnitudes fall below `floor` are skipped.
pub fn gradient_check<S, F>(
    store: &mut ParamStore<S>,
    step: f64,
    tolerance: f64,
    floor: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>, &mut Tape<S>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &mut loss)?;
    let numeric = numeric_gradients(store, step, &mut loss)?;
    let mut report = GradCheckReport::default();
    for (id, (a, n)) in store.ids().zip(analytic.iter().zip(&numeric)) {
        for (index, (&ga, &gn)) in a.iter().zip(n).enumerate() {
            let (ga, gn) = (ga.to_f64_lossy(), gn.to_f64_lossy());
            if ga.abs() < floor && gn.abs() < floor {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let rel = relative_error(ga, gn);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= tolerance {
                report.failures.push(Mismatch {
                    param: store.name(id).to_string(),
                    index,
                    analytic: ga,
                    numeric: gn,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
