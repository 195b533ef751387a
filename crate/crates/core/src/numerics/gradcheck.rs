use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Worst coordinate of one parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares tape gradients against central differences for every coordinate
/// of the selected parameters.
///
/// `loss` builds a scalar on a fresh tape; it is re-run at `theta +/- eps`
/// for each coordinate. The per-coordinate error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let out = loss(&mut tape)?;
        check_finite(tape.value(out).item())?;
        let grads = tape.backward(out)?;
        params
            .iter()
            .map(|&id| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| super::NdArray::zeros(store.value(id).shape()))
            })
            .collect::<Vec<_>>()
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let out = loss(&mut tape)?;
        check_finite(tape.value(out).item())
    };

    let mut report = Vec::with_capacity(params.len());
    for (&id, grad) in params.iter().zip(&analytic) {
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            coords_checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..grad.len() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            check.coords_checked += 1;
            if rel > check.max_rel_error || check.coords_checked == 1 {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}
