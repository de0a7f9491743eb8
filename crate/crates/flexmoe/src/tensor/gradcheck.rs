//! Finite-difference gradient checking.
//!
//! The oracle is the central difference (f(θ+eps) − f(θ−eps)) / (2·eps),
//! applied per coordinate with everything else frozen. The reported figure
//! per coordinate is
//!
//! ```text
//! |analytic − central| / max(|analytic|, |central|, 1e-8)
//! ```
//!
//! and the function returns the maximum over all checked coordinates. In
//! 64-bit arithmetic any smooth composite of the tape primitives should stay
//! below 1e-5 at eps = 1e-5.

use super::{NodeId, ParamId, ParamStore, Tape};
use crate::{Error, Result};

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a [`grad_check`] sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

/// Checks the tape's analytic gradients of a scalar-valued function against
/// central differences, coordinate by coordinate, over the listed parameters.
///
/// `f` must rebuild the same computation on any fresh tape (capture its
/// non-parameter inputs by value). Coordinates whose analytic and numeric
/// derivatives are both zero contribute zero error, so unused parameters are
/// safe to include.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Argument(format!("grad_check eps {eps} outside (0, 1e-3]")));
    }

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    if tape.shape(loss) != [1] {
        return Err(Error::Argument(format!(
            "grad_check needs a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    tape.write_param_grads(store);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.get(id).grad().expect("trainable parameter").to_vec())
        .collect();
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        let v = tape.value(loss)[0];
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite loss".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for (pi, &id) in ids.iter().enumerate() {
        for ci in 0..store.get(id).len() {
            let orig = store.get(id).data()[ci];
            store.get_mut(id).data_mut()[ci] = orig + eps;
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[ci] = orig - eps;
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[ci] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi][ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(WorstCoord {
                    param: store.name(id).to_string(),
                    index: ci,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
