//! Elementwise activations, causal depthwise convolution and RMSNorm, each with
//! its hand-written backward pass.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel width of the short causal convolution in front of q, k and v.
pub const CONV_WIDTH: usize = 4;

/// Default epsilon inside the RMSNorm square root.
pub const RMS_EPS: f64 = 1e-6;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn sigmoid_t<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

pub fn silu_t<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu)
}

/// `dy ⊙ silu'(x)`.
pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.zip_with(x, "silu_backward", |g, v| g * silu_grad(v))
}

/// `dy ⊙ (1 - y²)` given the tanh output `y`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.zip_with(y, "tanh_backward", |g, t| g * (T::one() - t * t))
}

/// `dy ⊙ y(1 - y)` given the sigmoid output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.zip_with(y, "sigmoid_backward", |g, s| g * s * (T::one() - s))
}

fn check_conv<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || kernel.rank() != 2 || kernel.shape()[1] != x.shape()[1] {
        return Err(dim_err("causal_depthwise_conv1d", x.shape(), kernel.shape()));
    }
    Ok((x.shape()[0], x.shape()[1], kernel.shape()[0]))
}

/// Depthwise causal convolution over time.
///
/// `out[t][c] = bias[c] + Σ_j kernel[j][c]·x[t-W+1+j][c]`, with positions before
/// `t = 0` treated as zeros, so `out[t]` only depends on `x[..=t]`.
pub fn causal_depthwise_conv1d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (steps, ch, width) = check_conv(x, kernel)?;
    if let Some(b) = bias {
        if b.len() != ch {
            return Err(dim_err("causal_depthwise_conv1d", x.shape(), b.shape()));
        }
    }
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = Tensor::zeros(&[steps, ch]);
    let od = out.data_mut();
    for t in 0..steps {
        for c in 0..ch {
            let mut acc = bias.map_or(T::zero(), |b| b.data()[c]);
            for j in 0..width {
                let src = t + j + 1;
                if src >= width {
                    acc += kd[j * ch + c] * xd[(src - width) * ch + c];
                }
            }
            od[t * ch + c] = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`causal_depthwise_conv1d`]: `(dx, dkernel, dbias)`.
pub fn causal_depthwise_conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (steps, ch, width) = check_conv(x, kernel)?;
    if dout.shape() != x.shape() {
        return Err(dim_err("causal_depthwise_conv1d_backward", x.shape(), dout.shape()));
    }
    let (xd, kd, gd) = (x.data(), kernel.data(), dout.data());
    let mut dx = Tensor::zeros(&[steps, ch]);
    let mut dk = Tensor::zeros(&[width, ch]);
    let dbias = dout.sum_rows();
    {
        let dxd = dx.data_mut();
        for s in 0..steps {
            for c in 0..ch {
                let mut acc = T::zero();
                for j in 0..width {
                    // x[s] feeds out[s + width - 1 - j] through tap j
                    let t = s + width - 1 - j;
                    if t < steps {
                        acc += kd[j * ch + c] * gd[t * ch + c];
                    }
                }
                dxd[s * ch + c] = acc;
            }
        }
    }
    {
        let dkd = dk.data_mut();
        for j in 0..width {
            for c in 0..ch {
                let mut acc = T::zero();
                for t in 0..steps {
                    let src = t + j + 1;
                    if src >= width {
                        acc += gd[t * ch + c] * xd[(src - width) * ch + c];
                    }
                }
                dkd[j * ch + c] = acc;
            }
        }
    }
    Ok((dx, dk, dbias))
}

/// Inverse RMS from an already-reduced sum of squares over `d` features.
#[inline]
pub fn inverse_rms<T: Scalar>(sum_sq: T, d: usize, eps: T) -> T {
    T::one() / (sum_sq / T::from_count(d) + eps).sqrt()
}

#[inline]
pub(crate) fn sum_sq_slice<T: Scalar>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &v| acc + v * v)
}

/// `y = w ⊙ x · s` with `s = 1/sqrt(mean(x²) + eps)`; returns `(y, s)`.
pub fn rmsnorm_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, eps: T) -> Result<(Tensor<T>, T)> {
    if x.len() != w.len() {
        return Err(dim_err("rmsnorm_forward", x.shape(), w.shape()));
    }
    let s = inverse_rms(sum_sq_slice(x.data()), x.len(), eps);
    let y = Tensor::new(
        x.shape(),
        x.data().iter().zip(w.data()).map(|(&xi, &wi)| wi * xi * s).collect(),
    )?;
    Ok((y, s))
}

/// RMSNorm backward from the cached inverse RMS `s`; returns `(dx, dw)`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    s: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.len() != w.len() || x.len() != dy.len() {
        return Err(dim_err("rmsnorm_backward", x.shape(), dy.shape()));
    }
    let r = rms_dot(x.data(), w.data(), dy.data());
    let (dx, dw) = rms_grads(x.data(), w.data(), dy.data(), s, r, x.len());
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(x.shape(), dw)?))
}

/// `r = Σ_j (w_j·dy_j)·x_j` in ascending `j`.
#[inline]
pub fn rms_dot<T: Scalar>(x: &[T], w: &[T], dy: &[T]) -> T {
    x.iter()
        .zip(w)
        .zip(dy)
        .fold(T::zero(), |acc, ((&xj, &wj), &gj)| acc + (wj * gj) * xj)
}

/// Local RMSNorm gradients given the (possibly globally reduced) `s`, `r` and
/// the global feature count `d`.
pub fn rms_grads<T: Scalar>(x: &[T], w: &[T], dy: &[T], s: T, r: T, d: usize) -> (Vec<T>, Vec<T>) {
    let df = T::from_count(d);
    let s3 = s * s * s;
    let dx = x
        .iter()
        .zip(w)
        .zip(dy)
        .map(|((&xi, &wi), &gi)| s * (wi * gi) - r * s3 * xi / df)
        .collect();
    let dw = x.iter().zip(dy).map(|(&xi, &gi)| gi * xi * s).collect();
    (dx, dw)
}

/// Row-wise RMSNorm of an `R×d` matrix, splitting the features into `groups`
/// equal contiguous chunks that are normalised independently, each with its
/// slice of `w`. Returns `y` and the inverse RMS as an `R×groups` matrix.
pub fn rmsnorm_rows_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    groups: usize,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, d) = (x.rows(), x.cols());
    if w.len() != d || groups == 0 || d % groups != 0 {
        return Err(dim_err("rmsnorm_rows_forward", x.shape(), w.shape()));
    }
    let gw = d / groups;
    let mut y = Tensor::zeros(&[rows, d]);
    let mut s = Tensor::zeros(&[rows, groups]);
    for r in 0..rows {
        for g in 0..groups {
            let lo = r * d + g * gw;
            let xs = &x.data()[lo..lo + gw];
            let ws = &w.data()[g * gw..(g + 1) * gw];
            let si = inverse_rms(sum_sq_slice(xs), gw, eps);
            s.data_mut()[r * groups + g] = si;
            for (o, (&xi, &wi)) in y.data_mut()[lo..lo + gw].iter_mut().zip(xs.iter().zip(ws)) {
                *o = wi * xi * si;
            }
        }
    }
    Ok((y, s))
}

/// Backward of [`rmsnorm_rows_forward`]; `dw` is accumulated over rows in ascending order.
pub fn rmsnorm_rows_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    s: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, d) = (x.rows(), x.cols());
    let groups = s.cols();
    if dy.shape() != x.shape() || w.len() != d || s.rows() != rows || d % groups != 0 {
        return Err(dim_err("rmsnorm_rows_backward", x.shape(), dy.shape()));
    }
    let gw = d / groups;
    let mut dx = Tensor::zeros(&[rows, d]);
    let mut dw = Tensor::zeros(&[d]);
    for r in 0..rows {
        for g in 0..groups {
            let lo = r * d + g * gw;
            let xs = &x.data()[lo..lo + gw];
            let gs = &dy.data()[lo..lo + gw];
            let ws = &w.data()[g * gw..(g + 1) * gw];
            let si = s.data()[r * groups + g];
            let rr = rms_dot(xs, ws, gs);
            let (gx, gwt) = rms_grads(xs, ws, gs, si, rr, gw);
            dx.data_mut()[lo..lo + gw].copy_from_slice(&gx);
            for (acc, v) in dw.data_mut()[g * gw..(g + 1) * gw].iter_mut().zip(gwt) {
                *acc += v;
            }
        }
    }
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, rel_error};
    use crate::random::SeededRng;
    use crate::tape::Tape;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(0.0f64.tanh(), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0f64) >= 0.0);
    }

    #[test]
    fn silu_derivative_matches_central_differences() {
        let mut rng = SeededRng::new(2);
        for _ in 0..100 {
            let x = rng.uniform(-6.0, 6.0);
            let h = 1e-5;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    fn direct_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (steps, ch) = (x.shape()[0], x.shape()[1]);
        Tensor::from_fn(&[steps, ch], |i| {
            let (t, c) = (i / ch, i % ch);
            let mut acc = b.at(&[c]);
            for j in 0..4 {
                let src = t as isize - 3 + j as isize;
                if src >= 0 {
                    acc += k.at(&[j, c]) * x.at(&[src as usize, c]);
                }
            }
            acc
        })
    }

    #[test]
    fn conv_identity_tap_is_exact() {
        let mut rng = SeededRng::new(4);
        let x = rng.normal_tensor(&[9, 3], 1.0);
        let k = Tensor::from_fn(&[4, 3], |i| if i / 3 == 3 { 1.0 } else { 0.0 });
        let out = causal_depthwise_conv1d(&x, &k, Some(&Tensor::zeros(&[3]))).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_matches_direct_sum_and_is_causal() {
        let mut rng = SeededRng::new(5);
        let x = rng.normal_tensor(&[10, 4], 1.0);
        let k = rng.normal_tensor(&[4, 4], 1.0);
        let b = rng.normal_tensor(&[4], 1.0);
        let out = causal_depthwise_conv1d(&x, &k, Some(&b)).unwrap();
        assert!(rel_error(&out, &direct_conv(&x, &k, &b)) < 1e-15);
        for t in 0..9 {
            let mut xp = x.clone();
            for c in 0..4 {
                xp.set(&[t + 1, c], 42.0);
            }
            let perturbed = causal_depthwise_conv1d(&xp, &k, Some(&b)).unwrap();
            assert_eq!(&perturbed.data()[..(t + 1) * 4], &out.data()[..(t + 1) * 4]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(6);
        let x = rng.normal_tensor(&[7, 3], 1.0);
        let k = rng.normal_tensor(&[4, 3], 1.0);
        let b = rng.normal_tensor(&[3], 1.0);
        let g = rng.normal_tensor(&[7, 3], 1.0);
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
            causal_depthwise_conv1d(x, k, Some(b)).unwrap().mul(&g).unwrap().sum()
        };
        let (dx, dk, db) = causal_depthwise_conv1d_backward(&x, &k, &g).unwrap();
        let fx = finite_difference_grad(|x| loss(x, &k, &b), &x, 1e-5);
        let fk = finite_difference_grad(|k| loss(&x, k, &b), &k, 1e-5);
        let fb = finite_difference_grad(|b| loss(&x, &k, b), &b, 1e-5);
        assert!(rel_error(&dx, &fx) < 1e-8);
        assert!(rel_error(&dk, &fk) < 1e-8);
        assert!(rel_error(&db, &fb) < 1e-8);
    }

    #[test]
    fn rmsnorm_unit_input() {
        let x = Tensor::<f64>::ones(&[6]);
        let (y, s) = rmsnorm_forward(&x, &Tensor::ones(&[6]), 0.0).unwrap();
        assert_eq!(y, x);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn rmsnorm_is_scale_invariant_without_eps() {
        let mut rng = SeededRng::new(8);
        let x = rng.normal_tensor(&[12], 1.0);
        let w = rng.normal_tensor(&[12], 1.0);
        let (y1, _) = rmsnorm_forward(&x, &w, 0.0).unwrap();
        let (y2, _) = rmsnorm_forward(&x.scale(7.5), &w, 0.0).unwrap();
        assert!(rel_error(&y1, &y2) < 1e-14);
    }

    #[test]
    fn rmsnorm_matches_direct_formula() {
        let mut rng = SeededRng::new(9);
        let x = rng.normal_tensor(&[16], 1.0);
        let w = rng.normal_tensor(&[16], 1.0);
        let (y, s) = rmsnorm_forward(&x, &w, 1e-6).unwrap();
        let ms: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 16.0;
        let s_ref = 1.0 / (ms + 1e-6).sqrt();
        assert!((s - s_ref).abs() < 1e-14);
        for i in 0..16 {
            assert!((y.at(&[i]) - w.at(&[i]) * x.at(&[i]) * s_ref).abs() < 1e-14);
        }
    }

    #[test]
    fn rmsnorm_backward_zero_upstream() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let w = Tensor::from_vec(vec![0.5, 1.0, 2.0]);
        let (_, s) = rmsnorm_forward(&x, &w, 0.0).unwrap();
        let (dx, dw) = rmsnorm_backward(&x, &w, s, &Tensor::zeros(&[3])).unwrap();
        assert!(dx.data().iter().chain(dw.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn rmsnorm_backward_matches_both_oracles() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(100 + seed);
            let x = rng.normal_tensor(&[10], 1.0);
            let w = rng.normal_tensor(&[10], 1.0);
            let g = rng.normal_tensor(&[10], 1.0);
            for eps in [0.0, 1e-6] {
                let loss =
                    |x: &Tensor<f64>, w: &Tensor<f64>| rmsnorm_forward(x, w, eps).unwrap().0.mul(&g).unwrap().sum();
                let (_, s) = rmsnorm_forward(&x, &w, eps).unwrap();
                let (dx, dw) = rmsnorm_backward(&x, &w, s, &g).unwrap();
                let fx = finite_difference_grad(|x| loss(x, &w), &x, 1e-5);
                assert!(rel_error(&dx, &fx) <= 1e-6, "seed {seed}");

                let mut tape = Tape::new();
                let xv = tape.leaf(x.reshape(&[1, 10]).unwrap());
                let wv = tape.leaf(w.clone());
                let y = tape.rmsnorm_rows(xv, wv, 1, eps);
                let gv = tape.leaf(g.reshape(&[1, 10]).unwrap());
                let prod = tape.mul(y, gv);
                let l = tape.sum(prod);
                let grads = tape.backward(l).unwrap();
                assert!(rel_error(&dw, &grads.wrt(wv)) <= 1e-12);
                assert!(rel_error(&dx, &grads.wrt(xv).reshape(&[10]).unwrap()) <= 1e-12);
            }
        }
    }

    #[test]
    fn rmsnorm_preserves_argmax_of_weighted_input() {
        let mut rng = SeededRng::new(12);
        for _ in 0..50 {
            let x = rng.normal_tensor(&[9], 1.0);
            let w = rng.normal_tensor(&[9], 1.0);
            let (y, s) = rmsnorm_forward(&x, &w, 1e-6).unwrap();
            assert!(s > 0.0);
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            let wx: Vec<f64> = x.data().iter().zip(w.data()).map(|(a, b)| a * b).collect();
            assert_eq!(argmax(y.data()), argmax(&wx));
        }
    }

    #[test]
    fn grouped_rows_match_per_vector_norm() {
        let mut rng = SeededRng::new(13);
        let x = rng.normal_tensor(&[3, 8], 1.0);
        let w = rng.normal_tensor(&[8], 1.0);
        let (y, s) = rmsnorm_rows_forward(&x, &w, 2, 1e-6).unwrap();
        for r in 0..3 {
            for g in 0..2 {
                let xs = Tensor::from_vec(x.data()[r * 8 + g * 4..r * 8 + g * 4 + 4].to_vec());
                let ws = Tensor::from_vec(w.data()[g * 4..g * 4 + 4].to_vec());
                let (ys, ss) = rmsnorm_forward(&xs, &ws, 1e-6).unwrap();
                assert_eq!(ss, s.at(&[r, g]));
                assert_eq!(ys.data(), &y.data()[r * 8 + g * 4..r * 8 + g * 4 + 4]);
            }
        }
    }
}
