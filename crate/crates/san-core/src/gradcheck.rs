//! Central finite-difference gradient checking.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::params::{GradMap, Params};

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares an autodiff gradient against central finite differences of `f`,
/// coordinate by coordinate, and returns the maximum relative error
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
///
/// `f` must be a deterministic function of the parameters (dropout off).
pub fn grad_check<F>(
    mut f: F,
    params: &Params,
    ad_grads: &GradMap,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Params) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidParameter(format!("eps {eps} must be > 0")));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    let mut probe = params.clone();
    let names: alloc::vec::Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let len = params.get(name).unwrap().len();
        let g_param = ad_grads
            .get(name)
            .ok_or(Error::Contract("grad_check: missing gradient for parameter"))?;
        for i in 0..len {
            let base = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = base + eps;
            let f_plus = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = base - eps;
            let f_minus = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = base;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at probe point of parameter {name}[{i}]"
                )));
            }
            let g_fd = (f_plus - f_minus) / (2.0 * eps);
            let g_ad = g_param.data()[i];
            let denom = (g_ad.abs() + g_fd.abs()).max(1e-8);
            let rel = (g_ad - g_fd).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
