use alloc::vec::Vec;

use super::tensor::TensorValue;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &TensorValue, h: f64) -> Result<TensorValue>
where
    F: FnMut(&TensorValue) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::argument("step", alloc::format!("h = {h}")));
    }
    let mut probe = x.clone();
    probe.clear_grad();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { context: "finite_diff_grad" });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    TensorValue::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_all_ones() {
        let x = TensorValue::from_vec(vec![0.5, -2.0, 7.0]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-4).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = TensorValue::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let x = TensorValue::scalar(0.0);
        let r = finite_diff_grad(|t| Ok(1.0 / (t.data()[0] - 1e-4)), &x, 1e-4);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
