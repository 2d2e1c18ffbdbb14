//! Central finite-difference verification of analytic gradients.
//!
//! Runs in f64 only: f32 rounding drowns the truncation error of the
//! central difference long before the tolerances used here.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, TensorRef};

/// Outcome of one harness run.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Coordinates checked: (parameter name, flat index, analytic, numeric, rel err).
    pub entries: Vec<(String, usize, f64, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.4).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.4 <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &(String, usize, f64, f64, f64)> {
        self.entries.iter().filter(move |e| e.4 > self.tol)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    // the floor turns the comparison absolute for near-zero gradients,
    // where the central difference is dominated by rounding noise
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Compare the tape gradient of `forward` against central differences with
/// step `h` at the given parameter coordinates.
///
/// `forward` must build the full computation on the provided tape and
/// return the scalar root; it is re-evaluated 2x per coordinate.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut forward: F,
    coords: &[(ParamId, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<TensorRef>,
{
    let mut tape = Tape::new();
    let root = forward(store, &mut tape)?;
    let base = tape.scalar_value(root);
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check forward value".into()));
    }
    tape.backward(root)?;
    store.zero_grads();
    tape.apply_param_grads(store);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let root = forward(store, &mut tape)?;
        let v = tape.scalar_value(root);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe value".into()));
        }
        Ok(v)
    };

    let mut entries = Vec::with_capacity(coords.len());
    for &(id, flat) in coords {
        let analytic = store.get(id).grad.data()[flat];
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!(
                "analytic gradient of {}[{}]",
                store.get(id).name,
                flat
            )));
        }
        let orig = store.get(id).value.data()[flat];
        store.get_mut(id).value.data_mut()[flat] = orig + h;
        let plus = eval(store)?;
        store.get_mut(id).value.data_mut()[flat] = orig - h;
        let minus = eval(store)?;
        store.get_mut(id).value.data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        entries.push((store.get(id).name.clone(), flat, analytic, numeric, rel_err(analytic, numeric)));
    }
    Ok(GradCheckReport { entries, tol })
}

/// Every coordinate of every parameter in the store.
pub fn all_coords(store: &ParamStore<f64>) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, item)| (0..item.value.len()).map(move |i| (id, i)))
        .collect()
}

/// A deterministic random sample of parameter coordinates.
pub fn sample_coords<R: Rng>(store: &ParamStore<f64>, rng: &mut R, count: usize) -> Vec<(ParamId, usize)> {
    let mut all = all_coords(store);
    all.shuffle(rng);
    all.truncate(count);
    all
}
