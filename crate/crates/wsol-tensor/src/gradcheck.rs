//! Finite-difference oracles for verifying analytic gradients.
//!
//! Everything here runs in f64; checks against f32 graphs should rebuild the
//! graph in f64 first.

use crate::tensor::Tensor;

/// Default step for [`central_difference`].
pub const FD_STEP: f64 = 1e-3;

/// Central-difference gradient of a scalar function of several tensors.
///
/// Perturbs one element at a time: `(f(x + h) - f(x - h)) / (2h)`. The
/// closure must be deterministic and must not retain state across calls.
pub fn central_difference<F>(f: &mut F, inputs: &[Tensor<f64>], step: f64) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        grads.push(grad);
    }
    grads
}

/// Relative error with an absolute floor, so comparisons near zero do not
/// blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Largest elementwise [`rel_err`] between two equally sized slices.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}
