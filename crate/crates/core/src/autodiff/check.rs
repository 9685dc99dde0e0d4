//! Central finite-difference gradient oracle.
//!
//! The oracle only ever evaluates the loss value, so it shares nothing with
//! the backward rules it checks.

use super::{Gradients, ParamId, ParamStore};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error with a floor on the denominator, so that entries whose true
/// gradient is numerically zero are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fourth-order central difference of `f` along one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let f1 = f(x + h) - f(x - h);
    let f2 = f(x + 2.0 * h) - f(x - 2.0 * h);
    (8.0 * f1 - f2) / (12.0 * h)
}

/// Compares `analytic` with central differences of `loss` over every entry of
/// the listed parameters (all parameters when `ids` is empty).
pub fn check_gradients(
    params: &mut ParamStore,
    analytic: &Gradients,
    ids: &[ParamId],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheck {
    let ids: Vec<ParamId> = if ids.is_empty() {
        params.ids().collect()
    } else {
        ids.to_vec()
    };
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        let n = params.value(id).len();
        for k in 0..n {
            let x0 = params.value(id).data()[k];
            let numeric = central_difference(
                |x| {
                    params.value_mut(id).data_mut()[k] = x;
                    loss(params)
                },
                x0,
                h,
            );
            params.value_mut(id).data_mut()[k] = x0;
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric, floor);
            out.checked += 1;
            if err > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = out.max_rel_error.max(err);
                if err >= out.max_rel_error {
                    out.worst = Some((params.name(id).to_string(), k));
                }
            }
        }
    }
    out
}
