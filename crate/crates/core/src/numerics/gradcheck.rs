//! Central-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - fd| / max(1, |fd|)` over every checked scalar.
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::NumericDomain(format!(
            "objective is {v}; first non-finite value at {}",
            g.first_non_finite().unwrap_or_else(|| "loss".into())
        )));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `eps`, over `params` (every parameter when `None`).
pub fn grad_check<F>(store: &ParamStore, params: Option<&[ParamId]>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(Error::dim(format!("objective must be scalar, got shape {:?}", v.shape())));
        }
        if !v.is_finite() {
            return Err(Error::NumericDomain(format!(
                "objective is not finite; first non-finite value at {}",
                g.first_non_finite().unwrap_or_else(|| "loss".into())
            )));
        }
        g.backward(loss)
    };

    let ids: Vec<ParamId> = match params {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = evaluate(&work, &f)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = evaluate(&work, &f)?;
            work.get_mut(id).data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if report.worst_param.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
