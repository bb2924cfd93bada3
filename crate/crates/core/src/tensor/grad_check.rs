//! Central finite-difference oracle for autodiff gradients.

use super::{Float, Tensor};

/// Largest elementwise relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn max_relative_error<T: Float>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `loss` with respect to the leaf `param`,
/// perturbing its values in place and restoring them afterwards.
pub fn numeric_grad<T: Float>(param: &Tensor<T>, step: f64, mut loss: impl FnMut() -> f64) -> Vec<T> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let h = T::lit(step);
    let n = param.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + h;
        let plus = loss();
        param.data_mut()[i] = orig - h;
        let minus = loss();
        param.data_mut()[i] = orig;
        out.push(T::lit((plus - minus) / (2.0 * step)));
    }
    out
}

/// Compare the autodiff gradient of `f` at `x` against central finite
/// differences with the given step. Returns the maximum relative error.
pub fn finite_diff_check<T: Float>(f: impl Fn(&Tensor<T>) -> Tensor<T>, x: &Tensor<T>, step: f64) -> f64 {
    let leaf = Tensor::param(x.to_vec(), x.shape()).expect("shape of an existing tensor");
    let out = f(&leaf);
    out.backward().expect("f must return a scalar");
    let analytic = leaf.grad().unwrap_or_else(|| vec![T::zero(); leaf.numel()]);
    let numeric = numeric_grad(&leaf, step, || f(&leaf).item().as_f64());
    max_relative_error(&analytic, &numeric)
}
