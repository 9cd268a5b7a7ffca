//! Central finite-difference validation of reverse-mode gradients.

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

const DENOM_FLOOR: f64 = 1e-8;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares the tape gradient of `loss_fn` against central differences
/// `(L(θ + h) - L(θ - h)) / 2h` for every trainable scalar of `params`.
///
/// `loss_fn` receives a fresh tape and the leaves of `params` in set order and
/// must return a scalar.
pub fn grad_check<F>(params: &ParamSet<f64>, step: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |p: &ParamSet<f64>, track: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = tape.bind(p, track);
        let loss = loss_fn(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(params, true)?;
    let base = tape.value(loss).data()[0];
    if !base.is_finite() {
        return Err(Error::Numeric("loss is non-finite at the unperturbed point".into()));
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let mut work = params.clone();
    for (pi, id) in params.ids().enumerate() {
        let param = params.get(id);
        if !param.trainable {
            continue;
        }
        let analytic = grads.get_or_zeros(vars[pi]);
        for j in 0..param.value.len() {
            let orig = param.value.data()[j];
            let mut at = |x: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[j] = x;
                let (t, _, l) = eval(&work, false)?;
                let v = t.value(l).data()[0];
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss is non-finite while perturbing `{}`[{j}]",
                        param.name
                    )));
                }
                Ok(v)
            };
            let plus = at(orig + step)?;
            let minus = at(orig - step)?;
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((param.name.clone(), j));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
