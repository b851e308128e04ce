//! Finite-difference verification of the analytic gradients.
//!
//! The harness perturbs every parameter element by ±eps, re-evaluates the
//! loss, and compares the central difference against the gradient the tape
//! produced. It is the ground truth the backward rules are tested against;
//! run it in `f64`, where the truncation error of the central difference
//! (O(eps^2)) dominates rounding noise.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport<S: Scalar> {
    /// Largest relative disagreement across all checked elements:
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: S,
    /// Index into the parameter list where the worst disagreement occurred.
    pub worst_param: usize,
    /// Flat element index within that parameter.
    pub worst_index: usize,
    /// Total number of scalar elements compared.
    pub checked: usize,
}

/// Compares the tape's gradients against central finite differences.
///
/// `f` must rebuild the loss from scratch on every call (it is invoked
/// `2 * total_elements + 1` times) and return a one-element tensor. The
/// parameters are restored to their original values before returning.
///
/// Any randomness inside `f` must be frozen: the check perturbs one element
/// at a time and assumes the two evaluations differ only through that
/// element.
pub fn grad_check<S, F>(mut f: F, params: &[Tensor<S>], eps: S) -> Result<GradCheckReport<S>>
where
    S: Scalar,
    F: FnMut() -> Result<Tensor<S>>,
{
    if params.is_empty() {
        return Err(Error::Usage("grad_check needs at least one parameter".into()));
    }
    if !(eps > S::zero()) || !eps.is_finite() {
        return Err(Error::Usage(format!("grad_check step must be positive and finite, got {eps}")));
    }
    for (i, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            return Err(Error::Usage(format!(
                "parameter {i} does not require gradients; grad_check would see only zeros"
            )));
        }
        p.zero_grad();
    }

    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<S>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![S::zero(); p.numel()]))
        .collect();

    let two_eps = eps + eps;
    let mut report = GradCheckReport {
        max_rel_error: S::zero(),
        worst_param: 0,
        worst_index: 0,
        checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let original = p.data()[i];
            p.data_mut()[i] = original + eps;
            let plus = f()?.item()?;
            p.data_mut()[i] = original - eps;
            let minus = f()?.item()?;
            p.data_mut()[i] = original;

            let numeric = (plus - minus) / two_eps;
            let a = analytic[pi][i];
            let denom = S::one().max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
