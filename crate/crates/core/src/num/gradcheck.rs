use alloc::format;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients to central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - fd| / max(1, |analytic|, |fd|)`.
    pub max_rel_error: f64,
    pub worst: Option<(ParamId, usize)>,
    pub coordinates: usize,
}

/// Checks the gradient of `f` with respect to every parameter in `store`.
///
/// `f` must be deterministic and differentiable at the current point; kinks
/// such as `|x|` at zero give meaningless results.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside (0, 1e-3]")));
    }
    let analytic = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        let v = tape.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check perturbation" })
        }
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    let ids: alloc::vec::Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let fd = (plus? - minus?) / (2.0 * eps);
            let a = analytic.param(id).map_or(0.0, |g| g.data()[k]);
            let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((id, k));
                }
            }
        }
    }
    Ok(report)
}
