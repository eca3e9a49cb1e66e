//! Central finite-difference gradient oracle.
//!
//! Re-evaluates a loss closure at perturbed parameter values, never touching
//! the tape's backward pass, so it stays an independent check of the
//! analytic gradients.

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Numeric gradient of `loss` with respect to every entry of every parameter
/// tensor, by central differences with step `eps`.
pub fn numeric_grad(
    params: &[Tensor],
    eps: f64,
    mut loss: impl FnMut(&[Tensor]) -> f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Vec::with_capacity(params[pi].data.len());
        for i in 0..params[pi].data.len() {
            let mut plus = params.to_vec();
            plus[pi].data[i] += eps;
            let lp = loss(&plus);
            let mut minus = params.to_vec();
            minus[pi].data[i] -= eps;
            let lm = loss(&minus);
            g.push((lp - lm) / (2.0 * eps));
        }
        grads.push(g);
    }
    grads
}

/// Largest elementwise relative error between two gradients, with an absolute
/// floor so entries near zero compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1e-4);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}
