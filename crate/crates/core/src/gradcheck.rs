//! Central finite differences and the error metric used by every gradient comparison.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_EPS: f64 = 1e-5;

/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_difference_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    let two_eps = eps + eps;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / two_eps;
    }
    grad
}

/// Relative error between two same-shaped tensors:
/// `max_i |a_i - b_i| / max(‖a‖∞, ‖b‖∞)`, and `0` when both are identically zero.
///
/// Scaling by the tensor-wide magnitude keeps near-zero entries (where a
/// per-element ratio is dominated by rounding noise) from dominating.
pub fn rel_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_error shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs().as_f64()));
    let scale = a.max_abs().as_f64().max(b.max_abs().as_f64());
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let g = finite_difference_grad(|x: &Tensor<f64>| x.sum_sq(), &x, FD_EPS);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() <= 1e-8);
        }
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_difference_grad(|_: &Tensor<f64>| 3.0, &x, FD_EPS);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rel_error_edge_cases() {
        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(rel_error(&z, &z), 0.0);
        let a = Tensor::from_vec(vec![1.0, 2.0, 4.0]);
        let b = Tensor::from_vec(vec![1.0, 2.0, 4.4]);
        assert!((rel_error(&a, &b) - 0.4 / 4.4).abs() < 1e-15);
    }
}
