//! Central-difference gradients, the oracle for every analytic backward.

use alloc::format;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_difference_gradient"));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Max over coordinates of `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from dominating
/// through cancellation noise in the finite difference.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    if analytic.shape() != numeric.shape() {
        return f64::INFINITY;
    }
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[3], vec![0.3, -2.0, 7.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_two() {
        let x = Tensor::scalar(2.0);
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_step_and_nonfinite() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_gradient(|t| Ok(t.sum()), &x, 0.0).is_err());
        assert!(finite_difference_gradient(|t| Ok(t.sum()), &x, -1.0).is_err());
        let r = finite_difference_gradient(|_| Ok(f64::NAN), &x, 1e-5);
        assert_eq!(r, Err(Error::NonFinite("finite_difference_gradient")));
    }
}
