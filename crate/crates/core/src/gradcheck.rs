//! Central-difference gradient oracle.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;

/// Magnitude below which gradient entries are compared absolutely.
pub const DEFAULT_SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose relative error exceeds the tolerance.
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rtol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.failures > 0)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(loss: &impl Fn(&mut Graph, &ParamStore) -> Result<Var>, store: &ParamStore) -> Result<f64> {
    let mut g = Graph::new();
    let root = loss(&mut g, store)?;
    g.value(root).item()
}

/// Compares the recorded gradient of `loss` against central differences for
/// every entry of every parameter in `store`.
///
/// Parameter values are restored before returning; gradients are left
/// holding the analytic result.
pub fn finite_diff_check<F>(store: &mut ParamStore, step: f64, rtol: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    finite_diff_check_with_floor(store, step, rtol, DEFAULT_SCALE_FLOOR, loss)
}

pub fn finite_diff_check_with_floor<F>(
    store: &mut ParamStore,
    step: f64,
    rtol: f64,
    floor: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let first = eval(&loss, store)?;
    let second = eval(&loss, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "loss is not deterministic: {first:e} then {second:e}"
        )));
    }

    store.zero_grad();
    let mut g = Graph::new();
    let root = loss(&mut g, store)?;
    g.backward(root, store)?;
    drop(g);

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad().data().to_vec();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            failures: 0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&loss, store);
            store.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&loss, store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let rel = relative_error(a, numeric, floor);
            if rel > rtol {
                check.failures += 1;
            }
            if rel >= check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { rtol, params })
}
