//! Central finite-difference oracle for analytic gradients (64-bit).

use rand::seq::index::sample;

use crate::error::Result;
use crate::params::ParamSet;
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates checked per tensor; larger tensors are sub-sampled.
    pub max_coords: usize,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-4, max_coords: 512, abs_floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the gradients produced by `loss_fn` against central differences.
///
/// `loss_fn` must return the loss and *accumulate* analytic gradients into the
/// parameter set it is given; gradients are zeroed before every call.
pub fn grad_check<F>(params: &mut ParamSet<f64>, cfg: GradCheckConfig, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet<f64>) -> Result<f64>,
{
    params.zero_grad();
    loss_fn(params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();
    params.zero_grad();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for pid in 0..params.len() {
        let n = params.by_id(pid).value.len();
        let mut r = rng::stream(cfg.seed, "grad_check", pid as u64);
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut r, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = params.by_id(pid).value.data()[i];
            params.by_id_mut(pid).value.data_mut()[i] = orig + cfg.eps;
            let plus = loss_fn(params)?;
            params.by_id_mut(pid).value.data_mut()[i] = orig - cfg.eps;
            let minus = loss_fn(params)?;
            params.by_id_mut(pid).value.data_mut()[i] = orig;
            params.zero_grad();
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[pid][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if report.checked == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.by_id(pid).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
