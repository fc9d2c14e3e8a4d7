use alloc::string::String;
use alloc::vec::Vec;

use super::loss::{batch_loss_and_grad, Example};
use super::{Encoder, EncoderParams, ModelError};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Gradients smaller than this are compared on an absolute scale: their
/// relative error is taken against this floor, because central differences
/// cannot resolve them (round-off in the loss is ~1e-11 at step 1e-4).
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Backprop and central-difference values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

/// Compares backprop against central differences on `coordinates` sampled
/// parameter entries. Sampling visits tensors round-robin (in a seeded random
/// order) so every tensor is checked when `coordinates >= tensor count`.
pub fn grad_check(
    encoder: &Encoder,
    params: &EncoderParams,
    examples: &[Example],
    eps: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    grad_check_with(encoder, params, examples, eps, coordinates, seed, |_| {})
}

/// [`grad_check`] with a hook that may alter the analytic gradients first
/// (used to confirm the check notices a broken gradient).
pub fn grad_check_with<F>(
    encoder: &Encoder,
    params: &EncoderParams,
    examples: &[Example],
    eps: f64,
    coordinates: usize,
    seed: u64,
    tamper: F,
) -> Result<GradCheckReport, ModelError>
where
    F: FnOnce(&mut [Matrix]),
{
    assert!(eps > 0.0, "grad_check step must be positive");
    let mut analytic = batch_loss_and_grad(encoder, params, examples, true)?.grads;
    if analytic.is_empty() {
        analytic = params
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
    }
    tamper(&mut analytic);

    let mut rng = Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..params.len()).collect();
    rng.shuffle(&mut order);

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    for c in 0..coordinates {
        let p = order[c % order.len()];
        let i = rng.below_usize(params.values()[p].len());
        let orig = params.values()[p].as_slice()[i];
        probe.values_mut()[p].as_mut_slice()[i] = orig + eps;
        let up = batch_loss_and_grad(encoder, &probe, examples, false)?.loss;
        probe.values_mut()[p].as_mut_slice()[i] = orig - eps;
        let down = batch_loss_and_grad(encoder, &probe, examples, false)?.loss;
        probe.values_mut()[p].as_mut_slice()[i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[p].as_slice()[i];
        let rel = libm::fabs(a - numeric) / libm::fabs(a).max(libm::fabs(numeric)).max(GRAD_FLOOR);
        report.coordinates += 1;
        if rel > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = rel;
            report.worst_param = params.names()[p].clone();
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
