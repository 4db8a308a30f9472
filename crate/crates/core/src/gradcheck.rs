//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Compares the analytic gradient returned by `f` at `point` against central
/// differences with step `eps`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteProbe);
    }
    if analytic.shape() != point.shape() {
        return Err(Error::Shape(format!(
            "analytic gradient {:?} vs point {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteProbe);
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Flattens the named parameters (in order) into one row vector.
pub fn flatten_params<T: Scalar>(params: &ParamStore<T>, names: &[String]) -> Tensor<f64> {
    let mut data = Vec::new();
    for n in names {
        data.extend(params[n].data().iter().map(|v| v.to_f64()));
    }
    Tensor::row(data)
}

/// Inverse of [`flatten_params`]: writes `flat` back into `params`.
pub fn unflatten_params<T: Scalar>(params: &mut ParamStore<T>, names: &[String], flat: &Tensor<f64>) {
    let mut off = 0;
    for n in names {
        let p = params.get_mut(n).expect("parameter present");
        for v in p.data_mut() {
            *v = T::from_f64(flat.data()[off]);
            off += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_no_error() {
        let w = [0.3, -1.2, 2.5];
        let f = |x: &Tensor<f64>| {
            let v: f64 = x.data().iter().zip(&w).map(|(a, b)| a * b).sum();
            Ok((v, Tensor::row(w.to_vec())))
        };
        let err = grad_check(f, &Tensor::row(vec![1.0, 2.0, 3.0]), 1e-5).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |x: &Tensor<f64>| Ok((x.item() * x.item(), Tensor::row(vec![x.item()])));
        let err = grad_check(f, &Tensor::row(vec![2.0]), 1e-5).unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn non_finite_probe_errors() {
        let f = |x: &Tensor<f64>| Ok((x.item().ln(), Tensor::row(vec![1.0 / x.item()])));
        assert!(matches!(
            grad_check(f, &Tensor::row(vec![1e-9]), 1e-5),
            Err(Error::NonFiniteProbe)
        ));
    }
}
