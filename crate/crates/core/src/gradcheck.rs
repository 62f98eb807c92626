//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate the tape's backward pass. The
//! numerical side only ever calls the forward function.

use crate::error::Result;
use crate::params::ParamStore;

/// Relative error between an analytic and a numerical derivative.
///
/// Denominators are floored at `floor` so that entries whose true value is
/// zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares gradients already accumulated in `store` against central
/// differences of `loss_fn`, perturbing parameter entries one by one.
///
/// `stride` > 1 checks every `stride`-th entry of each parameter tensor.
pub fn check_params<F>(
    store: &mut ParamStore,
    h: f64,
    floor: f64,
    stride: usize,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = match store.get(id).grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; store.get(id).numel()],
        };
        for i in (0..analytic.len()).step_by(stride.max(1)) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = loss_fn(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = loss_fn(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
