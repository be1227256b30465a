//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is checking.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{CsaError, Result};

/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding compare as equal instead of producing noise ratios.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, floor)`.
    pub rel_error: f64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(REL_ERROR_FLOOR)
}

fn entry(name: String, analytic: &[f64], numeric: &[f64]) -> GradCheckEntry {
    let max_abs_diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    GradCheckEntry {
        name,
        rel_error: relative_error(analytic, numeric),
        max_abs_diff,
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    match tape.value(v) {
        [x] => Ok(*x),
        _ => Err(CsaError::shape("gradcheck", tape.shape(v), &[])),
    }
}

/// Checks `d f / d inputs` for a function of free leaf tensors.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let leaves: Vec<Tensor> = inputs.iter().cloned().map(|t| t.with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out, &mut ParamStore::new())?;

    let mut report = GradCheckReport::default();
    for (k, v) in vars.iter().enumerate() {
        let n = leaves[k].numel();
        let analytic = grads.get(*v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let mut numeric = vec![0.0; n];
        let mut probe = leaves.clone();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = leaves[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            *slot = (plus - minus) / (2.0 * eps);
        }
        report.entries.push(entry(format!("input{k}"), &analytic, &numeric));
    }
    Ok(report)
}

/// Checks the gradients a loss accumulates into every tensor of `store`.
pub fn check_params<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &analytic_store)?;
    tape.backward(out, &mut analytic_store)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        let analytic = analytic_store
            .get(id)
            .grad()
            .map_or_else(|| vec![0.0; store.get(id).numel()], <[f64]>::to_vec);
        let numeric = numeric_param_grad(&mut probe, id, eps, &f)?;
        report
            .entries
            .push(entry(store.name(id).to_string(), &analytic, &numeric));
    }
    Ok(report)
}

fn numeric_param_grad<F>(probe: &mut ParamStore, id: ParamId, eps: f64, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let n = probe.get(id).numel();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let x0 = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = x0 + eps;
        let mut tape = Tape::new();
        let v = f(&mut tape, probe)?;
        let plus = scalar_of(&tape, v)?;
        probe.get_mut(id).data_mut()[i] = x0 - eps;
        let mut tape = Tape::new();
        let v = f(&mut tape, probe)?;
        let minus = scalar_of(&tape, v)?;
        probe.get_mut(id).data_mut()[i] = x0;
        *slot = (plus - minus) / (2.0 * eps);
    }
    Ok(out)
}
