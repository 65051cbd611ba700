//! Central finite-difference oracle for checking analytic gradients.
//!
//! Only forward evaluations are used here; nothing in this module touches
//! the backward pass it is meant to verify.

use crate::{ParamSet, Tensor};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, eps: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries where the loss has a kink within the probe interval at every
    /// step size tried; central differences say nothing there.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    /// Every compared entry within `tol`, and kinks hit at most one entry in ten.
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol && self.skipped * 10 <= self.checked + self.skipped
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.worst.is_some() && (other.max_rel_error >= self.max_rel_error || self.worst.is_none()) {
            self.worst = other.worst;
        }
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }
}

/// Central differences at `eps` and `eps / 2` disagree by more than this
/// (plus a relative part) only when a kink lies inside the probe interval.
const KINK_ABS: f64 = 1e-7;
const KINK_REL: f64 = 1e-6;
/// Step-size shrink factor for the retry after a kink.
const KINK_RETRY: f64 = 1e-2;

/// Compare `analytic` (one tensor per parameter) against central differences
/// of `loss`. With `max_per_tensor`, entries are sampled at an even stride.
///
/// Piecewise-linear activations make the loss non-differentiable on a
/// measure-zero set. An entry whose probe interval straddles such a kink is
/// re-probed with a smaller step and counted as skipped if it still does.
pub fn check_params(
    params: &ParamSet<f64>,
    analytic: &[Tensor<f64>],
    eps: f64,
    max_per_tensor: Option<usize>,
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), params.len(), "one analytic gradient per parameter");
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    let mut central = |probe: &mut ParamSet<f64>, pi: usize, idx: usize, h: f64| {
        let orig = probe.tensors()[pi].data()[idx];
        probe.tensors_mut()[pi].data_mut()[idx] = orig + h;
        let plus = loss(probe);
        probe.tensors_mut()[pi].data_mut()[idx] = orig - h;
        let minus = loss(probe);
        probe.tensors_mut()[pi].data_mut()[idx] = orig;
        (plus - minus) / (2.0 * h)
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let stride = match max_per_tensor {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let mut numeric = None;
            let mut h = eps;
            for _ in 0..2 {
                let full = central(&mut probe, pi, idx, h);
                let half = central(&mut probe, pi, idx, h / 2.0);
                if (full - half).abs() <= KINK_ABS + KINK_REL * full.abs() {
                    numeric = Some(full);
                    break;
                }
                h *= KINK_RETRY;
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = grad.data()[idx];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    param: params.names()[pi].clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}
